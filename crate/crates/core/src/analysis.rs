//! Semantic distance between class vocabularies and attention heatmaps.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use crate::datasets::ClassVocabulary;
use crate::encoders::checkpoint::write_atomic;
use crate::encoders::{DualEncoder, VideoTensor};
use crate::error::{Error, Result};

/// Unit-norm text embeddings of a vocabulary's class names, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabularyEmbedding {
    pub names: Vec<String>,
    pub vectors: Array2<f64>,
    pub encoder_digest: String,
}

impl VocabularyEmbedding {
    /// Normalizes every row of `raw`. Rejects empty sets, duplicate names and
    /// zero rows.
    pub fn new(names: Vec<String>, raw: Array2<f64>, encoder_digest: impl Into<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Invalid("vocabulary embedding needs at least one class".into()));
        }
        if names.len() != raw.nrows() {
            return Err(Error::Shape(format!("{} names for {} vectors", names.len(), raw.nrows())));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(d) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::Invalid(format!("duplicate class name '{d}'")));
        }
        let mut vectors = raw;
        for mut row in vectors.rows_mut() {
            let n = dot(row.view(), row.view()).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Invalid("cannot normalize a zero or non-finite embedding".into()));
            }
            row.mapv_inplace(|v| v / n);
        }
        Ok(Self {
            names,
            vectors,
            encoder_digest: encoder_digest.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// What text is embedded for each class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NameSource {
    /// The class name inserted into the vocabulary's prompt template.
    #[default]
    Templated,
    /// The bare class name.
    Bare,
}

pub fn embed_vocabulary(model: &DualEncoder, vocab: &ClassVocabulary, source: NameSource) -> Result<VocabularyEmbedding> {
    let texts: Vec<String> = match source {
        NameSource::Templated => vocab.names.iter().map(|n| vocab.templated(n)).collect(),
        NameSource::Bare => vocab.names.clone(),
    };
    let raw = model.encode_prompts(&texts)?;
    VocabularyEmbedding::new(vocab.names.clone(), raw, model.digest())
}

/// Sequential dot product; the summation order is part of the contract so
/// that results are reproducible bit for bit.
fn dot(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    let mut s = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        s += a * b;
    }
    s
}

/// Cosine similarity computed as `x·y / sqrt((x·x)(y·y))`. For `x == y`
/// this is exactly 1, since `sqrt(fl(d·d)) == |d|` under IEEE rounding.
pub fn cosine(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    dot(x, y) / (dot(x, x) * dot(y, y)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HausdorffMode {
    /// `min(d(A→B), d(B→A))` with `d(X→Y) = min_x max_y cos(x, y)`.
    #[default]
    MinMax,
    /// Average of the two directed mean-of-max scores.
    MeanMax,
}

fn directed_best(x: &Array2<f64>, y: &Array2<f64>) -> Vec<f64> {
    x.rows()
        .into_iter()
        .map(|a| y.rows().into_iter().map(|b| cosine(a, b)).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Set-to-set similarity in `[-1, 1]`; larger means semantically closer.
pub fn hausdorff_similarity(a: &VocabularyEmbedding, b: &VocabularyEmbedding, mode: HausdorffMode) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("hausdorff similarity of an empty set".into()));
    }
    if a.vectors.ncols() != b.vectors.ncols() {
        return Err(Error::Shape(format!(
            "embedding widths differ: {} vs {}",
            a.vectors.ncols(),
            b.vectors.ncols()
        )));
    }
    let ab = directed_best(&a.vectors, &b.vectors);
    let ba = directed_best(&b.vectors, &a.vectors);
    Ok(match mode {
        HausdorffMode::MinMax => {
            let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
            min(&ab).min(min(&ba))
        }
        HausdorffMode::MeanMax => {
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            0.5 * (mean(&ab) + mean(&ba))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceEntry {
    pub name: String,
    pub num_classes: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub train_name: String,
    pub encoder_digest: String,
    pub mode: HausdorffMode,
    pub source: NameSource,
    /// Sorted by descending similarity, ties broken by name.
    pub entries: Vec<DistanceEntry>,
}

impl DistanceReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("similarity to '{}' ({:?}, {:?})\n", self.train_name, self.mode, self.source);
        for e in &self.entries {
            out.push_str(&format!("{:>8.4}  {} ({} classes)\n", e.similarity, e.name, e.num_classes));
        }
        out
    }
}

/// Embeds every vocabulary with `model` and ranks the test vocabularies by
/// their similarity to the training vocabulary.
pub fn semantic_distance_report(
    train: (&str, &ClassVocabulary),
    tests: &[(String, ClassVocabulary)],
    model: &DualEncoder,
    mode: HausdorffMode,
    source: NameSource,
) -> Result<DistanceReport> {
    if train.1.is_empty() {
        return Err(Error::Invalid(format!("vocabulary '{}' is empty", train.0)));
    }
    let reference = embed_vocabulary(model, train.1, source)?;
    let mut entries = Vec::with_capacity(tests.len());
    for (name, vocab) in tests {
        if vocab.is_empty() {
            return Err(Error::Invalid(format!("vocabulary '{name}' is empty")));
        }
        let emb = embed_vocabulary(model, vocab, source)?;
        entries.push(DistanceEntry {
            name: name.clone(),
            num_classes: vocab.len(),
            similarity: hausdorff_similarity(&reference, &emb, mode)?,
        });
    }
    entries.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.name.cmp(&b.name)));
    Ok(DistanceReport {
        train_name: train.0.to_string(),
        encoder_digest: reference.encoder_digest,
        mode,
        source,
        entries,
    })
}

/// Global-token attention over the patch grid, one `grid × grid` map per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeatmap {
    pub clip_id: String,
    pub model_digest: String,
    pub frames: Vec<Array2<f64>>,
}

pub fn attention_grids(model: &DualEncoder, video: &VideoTensor) -> Result<Vec<Array2<f64>>> {
    let att = model.get_cls_attention(video)?;
    let grid = model.config().image_size / model.config().patch_size;
    att.rows()
        .into_iter()
        .map(|r| {
            Array2::from_shape_vec((grid, grid), r.to_vec()).map_err(|e| Error::Shape(e.to_string()))
        })
        .collect()
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn upsample_bilinear(grid: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (gh, gw) = grid.dim();
    let coord = |dst: usize, src_len: usize, dst_len: usize| {
        let c = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(src_len - 1), c - lo as f64)
    };
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, fy) = coord(y, gh, height);
        let (x0, x1, fx) = coord(x, gw, width);
        let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x1]] * fx;
        let bottom = grid[[y1, x0]] * (1.0 - fx) + grid[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// One line per grid row, values separated by spaces in shortest
/// round-trip form.
pub fn format_raw_weights(grid: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in grid.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_raw_weights(text: &str) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| Error::Invalid(format!("bad weight '{v}'"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("ragged weight rows".into()));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| Error::Shape(e.to_string()))
}

pub fn read_raw_weights(path: &Path) -> Result<Array2<f64>> {
    parse_raw_weights(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Files written for frame `t`: the overlay PNG and the raw weight grid.
pub fn heatmap_paths(out_dir: &Path, t: usize) -> (PathBuf, PathBuf) {
    (
        out_dir.join(format!("frame_{t:03}.png")),
        out_dir.join(format!("frame_{t:03}.weights.txt")),
    )
}

fn overlay(video: &VideoTensor, t: usize, heat: &Array2<f64>) -> image::RgbImage {
    let max = heat.iter().cloned().fold(0.0, f64::max);
    let min = heat.iter().cloned().fold(f64::INFINITY, f64::min);
    let span = if max > min { max - min } else { 1.0 };
    let data = video.data();
    image::RgbImage::from_fn(video.width() as u32, video.height() as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let h = (heat[[y, x]] - min) / span;
        // Blue (low) to red (high), blended half and half with the frame.
        let color = [h, 1.0 - (2.0 * h - 1.0).abs(), 1.0 - h];
        let px: [u8; 3] = std::array::from_fn(|c| {
            let v = 0.5 * data[[t, c, y, x]] + 0.5 * color[c];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        });
        image::Rgb(px)
    })
}

/// Writes one overlay image and one raw-weight file per frame of `video`.
pub fn attention_heatmaps(
    model: &DualEncoder,
    video: &VideoTensor,
    clip_id: &str,
    out_dir: &Path,
) -> Result<AttentionHeatmap> {
    let frames = attention_grids(model, video)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (t, grid) in frames.iter().enumerate() {
        let (png, raw) = heatmap_paths(out_dir, t);
        let heat = upsample_bilinear(grid, video.height(), video.width());
        let mut bytes = Vec::new();
        overlay(video, t, &heat).write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
        write_atomic(&png, &bytes)?;
        write_atomic(&raw, format_raw_weights(grid).as_bytes())?;
    }
    Ok(AttentionHeatmap {
        clip_id: clip_id.to_string(),
        model_digest: model.digest(),
        frames,
    })
}
