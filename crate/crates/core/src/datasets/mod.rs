//! Dataset manifests, frame loading, vocabularies, splits, class descriptions
//! and the synthetic toy benchmark.

pub mod descriptions;
pub mod sampling;
pub mod toy;
pub mod vocab;

pub use descriptions::{
    fetch_descriptions, DescriptionCache, DescriptionProvider, DescriptionRecord, TemplateProvider,
    DESCRIPTION_INSTRUCTION,
};
pub use sampling::{class_counts, make_base_novel_split, sample_few_shot, sample_frames, SampleMode, VocabSplit};
pub use toy::{generate_toy_dataset, ToyRender, ToySpec, ToyWorld};
pub use vocab::{
    cross_dataset_vocabulary, normalize_class_name, ClassVocabulary, PromptMode, DEFAULT_TEMPLATE, PLACEHOLDER,
};

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use crate::encoders::VideoTensor;
use crate::error::{Error, Result};

/// One clip in a manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clip_id: String,
    /// `toy:<class>:<clip seed>` for generated clips, otherwise a directory of
    /// PNG frames relative to the dataset root.
    pub frame_source: String,
    pub num_frames: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameSource {
    Toy { class: usize, clip_seed: u64 },
    Directory(PathBuf),
}

impl FrameSource {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("toy:") {
            let (class, seed) = rest
                .split_once(':')
                .ok_or_else(|| Error::Invalid(format!("malformed toy frame source '{s}'")))?;
            let parse = |v: &str| v.parse::<u64>().map_err(|_| Error::Invalid(format!("malformed toy frame source '{s}'")));
            return Ok(Self::Toy {
                class: parse(class)? as usize,
                clip_seed: parse(seed)?,
            });
        }
        if s.is_empty() {
            return Err(Error::Invalid("empty frame source".into()));
        }
        Ok(Self::Directory(PathBuf::from(s)))
    }

    pub fn toy_key(class: usize, clip_seed: u64) -> String {
        format!("toy:{class}:{clip_seed}")
    }
}

impl ManifestEntry {
    pub fn validate(&self, vocab: &ClassVocabulary) -> Result<()> {
        if self.num_frames == 0 {
            return Err(Error::Invalid(format!("clip '{}' has zero frames", self.clip_id)));
        }
        if !vocab.contains(&self.label) {
            return Err(Error::Invalid(format!(
                "clip '{}' label '{}' is not in the vocabulary",
                self.clip_id, self.label
            )));
        }
        FrameSource::parse(&self.frame_source).map(|_| ())
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    crate::encoders::checkpoint::write_atomic(path, out.as_bytes())
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub name: String,
    pub image_size: usize,
    /// Render parameters for `toy:` frame sources.
    #[serde(default)]
    pub toy: Option<ToyRender>,
}

/// A dataset directory: `dataset.json`, `vocab.json`, `train.jsonl`,
/// `test.jsonl` and optionally `descriptions.jsonl`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub info: DatasetInfo,
    pub vocab: ClassVocabulary,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

pub const DATASET_FILE: &str = "dataset.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const DESCRIPTIONS_FILE: &str = "descriptions.jsonl";

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        for e in self.train.iter().chain(&self.test) {
            e.validate(&self.vocab)?;
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let p = root.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(p, e))
        };
        let info: DatasetInfo = serde_json::from_str(&read(DATASET_FILE)?)?;
        let mut vocab: ClassVocabulary = serde_json::from_str(&read(VOCAB_FILE)?)?;
        let cache = DescriptionCache::load(&root.join(DESCRIPTIONS_FILE))?;
        for (name, descs) in cache.as_map() {
            if vocab.contains(&name) {
                vocab.descriptions.entry(name).or_insert(descs);
            }
        }
        let ds = Self {
            root: root.to_path_buf(),
            info,
            vocab,
            train: read_manifest(&root.join(TRAIN_FILE))?,
            test: read_manifest(&root.join(TEST_FILE))?,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Writes everything except descriptions, which live in their own cache file.
    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let info = serde_json::to_string_pretty(&self.info)?;
        crate::encoders::checkpoint::write_atomic(&root.join(DATASET_FILE), info.as_bytes())?;
        let mut vocab = self.vocab.clone();
        vocab.descriptions.clear();
        crate::encoders::checkpoint::write_atomic(&root.join(VOCAB_FILE), serde_json::to_string_pretty(&vocab)?.as_bytes())?;
        write_manifest(&root.join(TRAIN_FILE), &self.train)?;
        write_manifest(&root.join(TEST_FILE), &self.test)
    }

    pub fn loader(&self) -> FrameLoader {
        FrameLoader {
            root: self.root.clone(),
            image_size: self.info.image_size,
            toy: self.info.toy.clone().map(ToyWorld::new),
        }
    }

    /// Entries of `manifest` whose labels are in `classes`.
    pub fn restrict(manifest: &[ManifestEntry], classes: &[String]) -> Vec<ManifestEntry> {
        manifest.iter().filter(|e| classes.contains(&e.label)).cloned().collect()
    }
}

/// Turns manifest entries into frame tensors.
#[derive(Debug, Clone)]
pub struct FrameLoader {
    root: PathBuf,
    image_size: usize,
    toy: Option<ToyWorld>,
}

impl FrameLoader {
    pub fn toy(world: ToyWorld) -> Self {
        Self {
            root: PathBuf::new(),
            image_size: world.render().image_size,
            toy: Some(world),
        }
    }

    /// Loads the frames at `indices` (repeats allowed).
    pub fn load(&self, entry: &ManifestEntry, indices: &[usize]) -> Result<VideoTensor> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= entry.num_frames) {
            return Err(Error::Invalid(format!(
                "frame {bad} out of range for clip '{}' with {} frames",
                entry.clip_id, entry.num_frames
            )));
        }
        match FrameSource::parse(&entry.frame_source)? {
            FrameSource::Toy { class, clip_seed } => {
                let world = self
                    .toy
                    .as_ref()
                    .ok_or_else(|| Error::Config("dataset has no toy render parameters".into()))?;
                world.render_clip(class, clip_seed, indices)
            }
            FrameSource::Directory(dir) => self.load_png_frames(&self.root.join(dir), indices),
        }
    }

    /// Loads frames sampled from `entry` with [`sample_frames`].
    pub fn load_sampled(&self, entry: &ManifestEntry, n: usize, mode: SampleMode, seed: u64) -> Result<VideoTensor> {
        let idx = sample_frames(entry.num_frames, n, mode, seed)?;
        self.load(entry, &idx)
    }

    fn load_png_frames(&self, dir: &Path, indices: &[usize]) -> Result<VideoTensor> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        let s = self.image_size;
        let mut data = Array4::<f64>::zeros((indices.len(), 3, s, s));
        for (t, &i) in indices.iter().enumerate() {
            let path = files
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("{} has only {} frames", dir.display(), files.len())))?;
            let img = image::open(path)?.to_rgb8();
            if img.width() as usize != s || img.height() as usize != s {
                return Err(Error::Shape(format!(
                    "{} is {}x{}, expected {s}x{s}",
                    path.display(),
                    img.width(),
                    img.height()
                )));
            }
            for (x, y, px) in img.enumerate_pixels() {
                for c in 0..3 {
                    data[[t, c, y as usize, x as usize]] = px[c] as f64 / 255.0;
                }
            }
        }
        VideoTensor::new(data)
    }
}
