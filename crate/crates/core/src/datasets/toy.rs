//! Synthetic video world. Every class is an appearance word (a fixed pair of
//! colored sinusoidal gratings) plus a motion word (the direction the texture
//! travels over time), so class names share words in a controlled way and
//! appearance alone identifies the class up to its motion.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::path::PathBuf;

use super::{ClassVocabulary, Dataset, DatasetInfo, FrameSource, ManifestEntry};
use crate::encoders::VideoTensor;
use crate::error::{Error, Result};

pub const APPEARANCES: [&str; 16] = [
    "striped", "dotted", "checkered", "ringed", "speckled", "wavy", "zigzag", "plaid", "marbled", "grainy", "banded",
    "mottled", "rippled", "woven", "blotched", "hatched",
];

pub const MOTIONS: [&str; 4] = ["drifting", "rising", "sliding", "sinking"];

/// Unit pixel velocity of each motion word (x right, y down).
const VELOCITY: [(f64, f64); 4] = [(1.0, 0.0), (0.0, -1.0), (-1.0, 0.0), (0.0, 1.0)];

const BLUR_TAPS: usize = 5;

pub const LEXICON_SIZE: usize = APPEARANCES.len() * MOTIONS.len();

/// Global class index of an (appearance, motion) pair.
pub fn lexicon_index(appearance: usize, motion: usize) -> usize {
    appearance * MOTIONS.len() + motion
}

pub fn lexicon_name(global: usize) -> String {
    format!(
        "{} {}",
        APPEARANCES[global / MOTIONS.len()],
        MOTIONS[global % MOTIONS.len()]
    )
}

/// Parameters that determine pixel values; stored with a generated dataset so
/// `toy:` frame sources can be re-rendered on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyRender {
    pub image_size: usize,
    /// Pixels per frame travelled by the texture.
    pub motion_strength: f64,
    /// Contrast of the class texture; 0 gives flat gray clips.
    pub appearance_strength: f64,
    /// Amplitude of static per-clip pixel noise.
    pub noise: f64,
    /// Maximum per-clip phase offset in radians.
    pub phase_jitter: f64,
    /// Shutter time in frames; each frame averages the texture over this much
    /// of its motion, so frames carry a streak along the motion axis.
    pub exposure: f64,
    /// Seeds the appearance textures; shared by every dataset drawn from the same world.
    pub world_seed: u64,
}

impl Default for ToyRender {
    fn default() -> Self {
        Self {
            image_size: 32,
            motion_strength: 1.5,
            appearance_strength: 1.0,
            noise: 0.05,
            phase_jitter: 0.6,
            exposure: 4.0,
            world_seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
struct Texture {
    /// `(kx, ky, phase, per-channel amplitude)` for each grating.
    gratings: Vec<(f64, f64, f64, [f64; 3])>,
    tint: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct ToyWorld {
    render: ToyRender,
    textures: Vec<Texture>,
}

impl ToyWorld {
    pub fn new(render: ToyRender) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(render.world_seed);
        let textures = (0..APPEARANCES.len())
            .map(|_| {
                let gratings = (0..2)
                    .map(|_| {
                        let (kx, ky) = loop {
                            let kx = rng.gen_range(-3i32..=3);
                            let ky = rng.gen_range(-3i32..=3);
                            if kx != 0 && ky != 0 && kx.abs() != ky.abs() {
                                break (kx as f64, ky as f64);
                            }
                        };
                        let amp = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                        (kx, ky, rng.gen_range(0.0..TAU), amp)
                    })
                    .collect();
                let tint = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                Texture { gratings, tint }
            })
            .collect();
        Self { render, textures }
    }

    pub fn render(&self) -> &ToyRender {
        &self.render
    }

    /// Renders frames `indices` of clip `clip_seed` of global class `class`.
    pub fn render_clip(&self, class: usize, clip_seed: u64, indices: &[usize]) -> Result<VideoTensor> {
        if class >= LEXICON_SIZE {
            return Err(Error::Invalid(format!("toy class {class} outside lexicon of {LEXICON_SIZE}")));
        }
        if indices.is_empty() {
            return Err(Error::Invalid("no frames requested".into()));
        }
        let r = &self.render;
        let s = r.image_size;
        let tex = &self.textures[class / MOTIONS.len()];
        let (vx, vy) = VELOCITY[class % MOTIONS.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(clip_seed ^ (class as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let phase = rng.gen_range(-1.0..=1.0) * r.phase_jitter;
        let gain = 1.0 + rng.gen_range(-0.2..=0.2);
        let noise: Vec<f64> = (0..3 * s * s).map(|_| rng.gen_range(-1.0..=1.0) * r.noise).collect();

        // Sub-frame times, centered on the frame, spanning the exposure.
        let taps: Vec<f64> = (0..BLUR_TAPS)
            .map(|i| r.exposure * ((i as f64 + 0.5) / BLUR_TAPS as f64 - 0.5))
            .collect();
        let mut data = Array4::<f64>::zeros((indices.len(), 3, s, s));
        let mut waves = vec![0.0; tex.gratings.len()];
        for (t, &f) in indices.iter().enumerate() {
            for y in 0..s {
                for x in 0..s {
                    waves.iter_mut().for_each(|w| *w = 0.0);
                    for tau in &taps {
                        let time = f as f64 + tau;
                        let px = (x as f64 - vx * r.motion_strength * time) / s as f64;
                        let py = (y as f64 - vy * r.motion_strength * time) / s as f64;
                        for (w, (kx, ky, ph, _)) in waves.iter_mut().zip(&tex.gratings) {
                            *w += (TAU * (kx * px + ky * py) + ph + phase).sin() / BLUR_TAPS as f64;
                        }
                    }
                    for c in 0..3 {
                        let mut v = 0.2 * tex.tint[c];
                        for (w, g) in waves.iter().zip(&tex.gratings) {
                            v += 0.15 * g.3[c] * w;
                        }
                        let value = 0.5 + r.appearance_strength * gain * v + noise[(c * s + y) * s + x];
                        data[[t, c, y, x]] = value.clamp(0.0, 1.0);
                    }
                }
            }
        }
        VideoTensor::new(data)
    }

    /// Every lexicon class, in global index order.
    pub fn lexicon_vocabulary() -> ClassVocabulary {
        ClassVocabulary::new((0..LEXICON_SIZE).map(lexicon_name).collect()).expect("lexicon names are unique")
    }

    /// `clips_per_class` clips of every lexicon class, for pretraining an image-text teacher.
    pub fn lexicon_manifest(&self, clips_per_class: usize, frames: usize, seed: u64) -> Vec<ManifestEntry> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(LEXICON_SIZE * clips_per_class);
        for g in 0..LEXICON_SIZE {
            for i in 0..clips_per_class {
                out.push(ManifestEntry {
                    clip_id: format!("lex-{g}-{i}"),
                    frame_source: FrameSource::toy_key(g, rng.gen()),
                    num_frames: frames,
                    label: lexicon_name(g),
                });
            }
        }
        out
    }
}

/// Shape of a generated benchmark dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub name: String,
    pub num_classes: usize,
    /// Consecutive classes share an appearance and differ in motion.
    pub motions_per_appearance: usize,
    /// First appearance word used; datasets with different offsets overlap partially.
    pub appearance_offset: usize,
    /// Training clips for classes in the first half of appearance groups.
    pub frequent_train_clips: usize,
    /// Training clips for the remaining classes.
    pub rare_train_clips: usize,
    pub test_clips: usize,
    pub frames_per_clip: usize,
    pub render: ToyRender,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            name: "toy".into(),
            num_classes: 20,
            motions_per_appearance: 2,
            appearance_offset: 0,
            frequent_train_clips: 24,
            rare_train_clips: 12,
            test_clips: 8,
            frames_per_clip: 16,
            render: ToyRender::default(),
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("toy dataset needs at least one class".into()));
        }
        if !(1..=MOTIONS.len()).contains(&self.motions_per_appearance) {
            return Err(Error::Config(format!(
                "motions_per_appearance must be in 1..={}",
                MOTIONS.len()
            )));
        }
        if self.num_classes.div_ceil(self.motions_per_appearance) > APPEARANCES.len() {
            return Err(Error::Config(format!(
                "{} classes need more than {} appearance words",
                self.num_classes,
                APPEARANCES.len()
            )));
        }
        if self.frames_per_clip == 0 || self.test_clips == 0 || self.frequent_train_clips == 0 {
            return Err(Error::Config("clip and frame counts must be positive".into()));
        }
        if self.render.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        Ok(())
    }

    /// Global lexicon index of local class `i`.
    pub fn global_class(&self, i: usize) -> usize {
        let group = i / self.motions_per_appearance;
        let appearance = (self.appearance_offset + group) % APPEARANCES.len();
        lexicon_index(appearance, i % self.motions_per_appearance)
    }

    fn is_frequent(&self, i: usize) -> bool {
        let groups = self.num_classes.div_ceil(self.motions_per_appearance);
        i / self.motions_per_appearance < groups / 2
    }
}

/// Builds a dataset whose frames are rendered on demand from `spec.render`.
/// The returned dataset has an empty root; save it to materialize the files.
pub fn generate_toy_dataset(spec: &ToySpec) -> Result<Dataset> {
    spec.validate()?;
    let names: Vec<String> = (0..spec.num_classes).map(|i| lexicon_name(spec.global_class(i))).collect();
    let vocab = ClassVocabulary::new(names)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..spec.num_classes {
        let g = spec.global_class(i);
        let n_train = if spec.is_frequent(i) {
            spec.frequent_train_clips
        } else {
            spec.rare_train_clips
        };
        for (split, n, out) in [("train", n_train, &mut train), ("test", spec.test_clips, &mut test)] {
            for j in 0..n {
                out.push(ManifestEntry {
                    clip_id: format!("{}-{split}-{i}-{j}", spec.name),
                    frame_source: FrameSource::toy_key(g, rng.gen()),
                    num_frames: spec.frames_per_clip,
                    label: vocab.names[i].clone(),
                });
            }
        }
    }
    let ds = Dataset {
        root: PathBuf::new(),
        info: DatasetInfo {
            name: spec.name.clone(),
            image_size: spec.render.image_size,
            toy: Some(spec.render.clone()),
        },
        vocab,
        train,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{class_counts, make_base_novel_split};
    use ndarray::Axis;

    fn small(seed: u64) -> ToySpec {
        ToySpec {
            num_classes: 6,
            frequent_train_clips: 4,
            rare_train_clips: 2,
            test_clips: 3,
            frames_per_clip: 6,
            render: ToyRender {
                image_size: 16,
                ..ToyRender::default()
            },
            seed,
            ..ToySpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_toy_dataset(&small(3)).unwrap();
        let b = generate_toy_dataset(&small(3)).unwrap();
        assert_eq!(a, b);
        let la = a.loader();
        let lb = b.loader();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(la.load(x, &[0, 5]).unwrap(), lb.load(y, &[0, 5]).unwrap());
        }
        assert_ne!(a.train, generate_toy_dataset(&small(4)).unwrap().train);
    }

    #[test]
    fn zero_motion_gives_static_clips() {
        let mut spec = small(1);
        spec.render.motion_strength = 0.0;
        let ds = generate_toy_dataset(&spec).unwrap();
        let v = ds.loader().load(&ds.train[0], &(0..6).collect::<Vec<_>>()).unwrap();
        let first = v.data().index_axis(Axis(0), 0).to_owned();
        for t in 1..6 {
            assert_eq!(v.data().index_axis(Axis(0), t), first);
        }
    }

    #[test]
    fn motion_moves_pixels() {
        let ds = generate_toy_dataset(&small(1)).unwrap();
        let v = ds.loader().load(&ds.train[0], &[0, 3]).unwrap();
        assert_ne!(v.data().index_axis(Axis(0), 0), v.data().index_axis(Axis(0), 1));
    }

    #[test]
    fn names_share_words_and_frequency_split_is_appearance_disjoint() {
        let ds = generate_toy_dataset(&small(0)).unwrap();
        assert_eq!(
            ds.vocab.names,
            vec![
                "striped drifting",
                "striped rising",
                "dotted drifting",
                "dotted rising",
                "checkered drifting",
                "checkered rising"
            ]
        );
        let bench = generate_toy_dataset(&ToySpec::default()).unwrap();
        let split = make_base_novel_split(&bench.vocab, &class_counts(&bench.train), 0).unwrap();
        assert_eq!(split.base.len(), 10);
        let words = |names: &[String]| -> std::collections::BTreeSet<String> {
            names.iter().map(|n| n.split(' ').next().unwrap().to_string()).collect()
        };
        assert!(words(&split.base).is_disjoint(&words(&split.novel)));

        let mut shifted = small(0);
        shifted.appearance_offset = 2;
        let other = generate_toy_dataset(&shifted).unwrap();
        assert_eq!(other.vocab.names[0], "checkered drifting");
    }

    #[test]
    fn degenerate_specs_rejected() {
        let mut s = small(0);
        s.num_classes = 0;
        assert!(generate_toy_dataset(&s).is_err());
        s.num_classes = 40;
        assert!(generate_toy_dataset(&s).is_err());
    }

    #[test]
    fn nearest_centroid_on_mean_pixels_beats_chance() {
        let spec = ToySpec {
            num_classes: 8,
            motions_per_appearance: 1,
            frequent_train_clips: 6,
            rare_train_clips: 6,
            test_clips: 5,
            frames_per_clip: 4,
            render: ToyRender {
                image_size: 8,
                motion_strength: 0.0,
                noise: 0.1,
                ..ToyRender::default()
            },
            seed: 9,
            ..ToySpec::default()
        };
        let ds = generate_toy_dataset(&spec).unwrap();
        let loader = ds.loader();
        let feature = |e: &ManifestEntry| -> Vec<f64> {
            let v = loader.load(e, &[0, 1, 2, 3]).unwrap();
            v.data().mean_axis(Axis(0)).unwrap().iter().copied().collect()
        };
        let k = ds.vocab.len();
        let dim = 3 * 8 * 8;
        let mut centroids = vec![vec![0.0; dim]; k];
        let mut counts = vec![0.0; k];
        for e in &ds.train {
            let c = ds.vocab.index_of(&e.label).unwrap();
            for (a, b) in centroids[c].iter_mut().zip(feature(e)) {
                *a += b;
            }
            counts[c] += 1.0;
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= n);
        }
        let mut correct = 0;
        for e in &ds.test {
            let f = feature(e);
            let pred = (0..k)
                .min_by(|&a, &b| {
                    let d = |c: &Vec<f64>| c.iter().zip(&f).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                    d(&centroids[a]).partial_cmp(&d(&centroids[b])).unwrap()
                })
                .unwrap();
            correct += (pred == ds.vocab.index_of(&e.label).unwrap()) as usize;
        }
        let acc = correct as f64 / ds.test.len() as f64;
        assert!(acc > 2.0 / k as f64, "accuracy {acc}");
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = generate_toy_dataset(&small(2)).unwrap();
        ds.save(dir.path()).unwrap();
        ds.root = dir.path().to_path_buf();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }
}
