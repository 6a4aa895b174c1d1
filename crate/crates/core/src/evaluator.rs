//! Multi-view prediction, top-1 / harmonic-mean metrics, the base-to-novel and
//! cross-dataset protocols, and logit-sum ensembles.
//!
//! Functions that take `models: &[&DualEncoder]` sum the logits of every model
//! given, so a single-element slice is ordinary evaluation and a frozen model
//! plus a tuned one is the ensemble baseline.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::datasets::{
    cross_dataset_vocabulary, normalize_class_name, ClassVocabulary, Dataset, FrameLoader, ManifestEntry,
    PromptMode, SampleMode, VocabSplit,
};
use crate::digest;
use crate::encoders::{DualEncoder, VideoTensor};
use crate::error::{Error, Result, Warned, Warning};
use crate::objective::{similarity_logits, DEFAULT_LOGIT_SCALE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Temporal clips per test video; their logits are averaged.
    pub views: usize,
    pub frames_per_clip: usize,
    pub logit_scale: f64,
    /// Classify base and novel samples over the union vocabulary instead of their own set.
    pub joint_vocabulary: bool,
    /// Add every class description to the eval prompts.
    pub eval_descriptions: bool,
    /// Drop target classes whose normalized name appears in the source vocabulary.
    pub exclude_overlap: bool,
    /// Number of random class subsets evaluated in the cross-dataset protocol.
    pub num_splits: usize,
    /// Fraction of target classes in each subset.
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            views: 3,
            frames_per_clip: 8,
            logit_scale: DEFAULT_LOGIT_SCALE,
            joint_vocabulary: false,
            eval_descriptions: false,
            exclude_overlap: true,
            num_splits: 3,
            split_fraction: 0.75,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 || self.frames_per_clip == 0 || self.num_splits == 0 {
            return Err(Error::Config("views, frames_per_clip and num_splits must be at least 1".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction <= 1.0) {
            return Err(Error::Config("split_fraction must be in (0, 1]".into()));
        }
        if !(self.logit_scale > 0.0) {
            return Err(Error::Config("logit_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        digest::of_json(self)
    }

    fn prompt_mode(&self) -> PromptMode {
        if self.eval_descriptions {
            PromptMode::EvalWithDescriptions
        } else {
            PromptMode::Eval
        }
    }
}

/// Class text features, `K × C`: the mean embedding of each class's prompts.
pub fn class_text_features(model: &DualEncoder, vocab: &ClassVocabulary, mode: PromptMode) -> Result<Array2<f64>> {
    if vocab.is_empty() {
        return Err(Error::Invalid("empty vocabulary".into()));
    }
    let mut prompts = Vec::new();
    let mut counts = Vec::with_capacity(vocab.len());
    for name in &vocab.names {
        let p = vocab.render_prompts(name, mode, 0)?;
        counts.push(p.len());
        prompts.extend(p);
    }
    let rows = model.encode_prompts(&prompts)?;
    let mut out = Array2::zeros((vocab.len(), rows.ncols()));
    let mut start = 0;
    for (k, &n) in counts.iter().enumerate() {
        let mean = rows.slice(ndarray::s![start..start + n, ..]).sum_axis(Axis(0)) / n as f64;
        out.row_mut(k).assign(&mean);
        start += n;
    }
    Ok(out)
}

/// Logits of one video averaged over `views` temporal clips of
/// `frames_per_clip` frames each: `(row_1 + … + row_views) / views`.
pub fn multiview_logits(
    model: &DualEncoder,
    video: &VideoTensor,
    views: usize,
    frames_per_clip: usize,
    text: ArrayView2<f64>,
    logit_scale: f64,
) -> Result<Array1<f64>> {
    if views == 0 {
        return Err(Error::Invalid("views must be at least 1".into()));
    }
    let mut sum: Option<Array1<f64>> = None;
    for clip in 0..views {
        let idx = crate::datasets::sample_frames(video.num_frames(), frames_per_clip, SampleMode::Eval { clip, views }, 0)?;
        let emb = model.encode_videos(&[video.select_frames(&idx)?])?;
        let row = similarity_logits(emb.view(), text, logit_scale)?.values.row(0).to_owned();
        sum = Some(match sum {
            None => row,
            Some(s) => s + &row,
        });
    }
    Ok(sum.expect("views >= 1") / views as f64)
}

/// Element-wise sum of two logit rows.
pub fn ensemble_logits(frozen: ArrayView1<f64>, tuned: ArrayView1<f64>) -> Result<Array1<f64>> {
    if frozen.len() != tuned.len() {
        return Err(Error::Shape(format!(
            "logit widths differ: {} vs {}",
            frozen.len(),
            tuned.len()
        )));
    }
    Ok(&frozen + &tuned)
}

/// Index of the largest value; the lowest index wins exact ties.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Percentage of rows whose argmax equals the label.
pub fn top1_accuracy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Invalid("cannot score an empty set".into()));
    }
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let correct = logits
        .outer_iter()
        .zip(labels)
        .filter(|(row, &l)| argmax(row.view()) == l)
        .count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// `2ab / (a + b)`; defined as 0 (with a warning) when either input is not positive.
pub fn harmonic_mean(base: f64, novel: f64) -> Warned<f64> {
    if !(base > 0.0 && novel > 0.0) {
        return Warned::with(0.0, vec![Warning::NonPositiveAccuracy { base, novel }]);
    }
    Warned::clean(2.0 * base * novel / (base + novel))
}

/// Summed multi-view logits of `models` for each entry, `N × K`.
pub fn score_entries(
    models: &[&DualEncoder],
    entries: &[ManifestEntry],
    loader: &FrameLoader,
    vocab: &ClassVocabulary,
    config: &EvalConfig,
) -> Result<Array2<f64>> {
    if models.is_empty() {
        return Err(Error::Invalid("no models to evaluate".into()));
    }
    let mut total = Array2::<f64>::zeros((entries.len(), vocab.len()));
    for model in models {
        let text = class_text_features(model, vocab, config.prompt_mode())?;
        let mut sum = Array2::<f64>::zeros((entries.len(), vocab.len()));
        for clip in 0..config.views {
            let mode = SampleMode::Eval { clip, views: config.views };
            for (chunk_idx, chunk) in entries.chunks(16).enumerate() {
                let videos = chunk
                    .iter()
                    .map(|e| loader.load_sampled(e, config.frames_per_clip, mode, 0))
                    .collect::<Result<Vec<_>>>()?;
                let emb = model.encode_videos(&videos)?;
                let logits = similarity_logits(emb.view(), text.view(), config.logit_scale)?;
                let start = chunk_idx * 16;
                let mut rows = sum.slice_mut(ndarray::s![start..start + chunk.len(), ..]);
                rows += &logits.values;
            }
        }
        total += &(sum / config.views as f64);
    }
    Ok(total)
}

fn labels_for(entries: &[ManifestEntry], vocab: &ClassVocabulary) -> Result<Vec<usize>> {
    entries
        .iter()
        .map(|e| {
            vocab
                .index_of(&e.label)
                .ok_or_else(|| Error::Invalid(format!("label '{}' not in evaluation vocabulary", e.label)))
        })
        .collect()
}

/// Top-1 of `models` on `entries`, classifying over `vocab`.
pub fn evaluate_top1(
    models: &[&DualEncoder],
    entries: &[ManifestEntry],
    loader: &FrameLoader,
    vocab: &ClassVocabulary,
    config: &EvalConfig,
) -> Result<f64> {
    let labels = labels_for(entries, vocab)?;
    let logits = score_entries(models, entries, loader, vocab, config)?;
    top1_accuracy(logits.view(), &labels)
}

/// Mean L2 distance between the pooled video features of two models, over
/// centered single-view clips of `entries`.
pub fn feature_drift(
    reference: &DualEncoder,
    other: &DualEncoder,
    entries: &[ManifestEntry],
    loader: &FrameLoader,
    frames_per_clip: usize,
) -> Result<f64> {
    if entries.is_empty() {
        return Err(Error::Invalid("no clips to measure drift on".into()));
    }
    let mut total = 0.0;
    for chunk in entries.chunks(16) {
        let videos = chunk
            .iter()
            .map(|e| loader.load_sampled(e, frames_per_clip, SampleMode::centered(), 0))
            .collect::<Result<Vec<_>>>()?;
        let a = reference.encode_videos(&videos)?;
        let b = other.encode_videos(&videos)?;
        for (x, y) in a.outer_iter().zip(b.outer_iter()) {
            total += x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        }
    }
    Ok(total / entries.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    BaseToNovel,
    CrossDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub name: String,
    pub vocab_digest: String,
    pub base: Option<f64>,
    pub novel: Option<f64>,
    pub hm: Option<f64>,
    pub top1: Option<f64>,
    pub num_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    /// Means of the per-split base and novel columns and their harmonic mean.
    BaseToNovel { base: f64, novel: f64, hm: f64 },
    /// Mean and population standard deviation of per-split top-1.
    CrossDataset { mean: f64, std: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub config_digest: String,
    pub model_digests: Vec<String>,
    pub vocab_digest: String,
    pub splits: Vec<SplitResult>,
    pub aggregate: Aggregate,
    pub warnings: Vec<Warning>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::encoders::checkpoint::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Plain-text table: one row per split plus the aggregate.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.1}"));
        match &self.aggregate {
            Aggregate::BaseToNovel { base, novel, hm } => {
                let _ = writeln!(s, "{:<12} {:>7} {:>7} {:>7}", "split", "base", "novel", "HM");
                for r in &self.splits {
                    let _ = writeln!(s, "{:<12} {:>7} {:>7} {:>7}", r.name, f(r.base), f(r.novel), f(r.hm));
                }
                let _ = writeln!(s, "{:<12} {:>7.1} {:>7.1} {:>7.1}", "mean", base, novel, hm);
            }
            Aggregate::CrossDataset { mean, std } => {
                let _ = writeln!(s, "{:<12} {:>7}", "split", "top-1");
                for r in &self.splits {
                    let _ = writeln!(s, "{:<12} {:>7}", r.name, f(r.top1));
                }
                let _ = writeln!(s, "{:<12} {mean:.1} ± {std:.1}", "mean");
            }
        }
        s
    }
}

/// One trained model (or ensemble) with the split it was trained on.
#[derive(Debug, Clone)]
pub struct BaseToNovelRun<'a> {
    pub name: String,
    pub models: Vec<&'a DualEncoder>,
    pub split: &'a VocabSplit,
}

/// Base and novel top-1 on the dataset's test clips for each run, with the
/// harmonic mean per run and of the mean base/novel columns.
pub fn evaluate_base_to_novel(runs: &[BaseToNovelRun], dataset: &Dataset, config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    if runs.is_empty() {
        return Err(Error::Invalid("no runs to evaluate".into()));
    }
    let loader = dataset.loader();
    let mut splits = Vec::new();
    let mut warnings = Vec::new();
    let mut digests = BTreeSet::new();
    for run in runs {
        if run.split.vocab_digest != dataset.vocab.digest() {
            return Err(Error::DigestMismatch {
                expected: dataset.vocab.digest(),
                found: run.split.vocab_digest.clone(),
            });
        }
        run.split.validate(&dataset.vocab)?;
        for m in &run.models {
            digests.insert(m.digest());
        }
        let base_vocab = dataset.vocab.subset(&run.split.base)?;
        let novel_vocab = dataset.vocab.subset(&run.split.novel)?;
        let joint: Vec<String> = run.split.base.iter().chain(&run.split.novel).cloned().collect();
        let joint_vocab = dataset.vocab.subset(&joint)?;
        let score = |classes: &ClassVocabulary| -> Result<(f64, usize)> {
            let entries = Dataset::restrict(&dataset.test, &classes.names);
            let vocab = if config.joint_vocabulary { &joint_vocab } else { classes };
            Ok((evaluate_top1(&run.models, &entries, &loader, vocab, config)?, entries.len()))
        };
        let (base, nb) = score(&base_vocab)?;
        let (novel, nn) = score(&novel_vocab)?;
        let hm = harmonic_mean(base, novel);
        warnings.extend(hm.warnings);
        splits.push(SplitResult {
            name: run.name.clone(),
            vocab_digest: joint_vocab.digest(),
            base: Some(base),
            novel: Some(novel),
            hm: Some(hm.value),
            top1: None,
            num_samples: nb + nn,
        });
    }
    let n = splits.len() as f64;
    let base = splits.iter().filter_map(|s| s.base).sum::<f64>() / n;
    let novel = splits.iter().filter_map(|s| s.novel).sum::<f64>() / n;
    let hm = harmonic_mean(base, novel);
    warnings.extend(hm.warnings);
    Ok(EvalReport {
        protocol: Protocol::BaseToNovel,
        config_digest: config.digest(),
        model_digests: digests.into_iter().collect(),
        vocab_digest: dataset.vocab.digest(),
        splits,
        aggregate: Aggregate::BaseToNovel { base, novel, hm: hm.value },
        warnings,
    })
}

/// Seeded class subsets of the target vocabulary, each of
/// `ceil(fraction · K)` classes (at least one).
pub fn cross_dataset_splits(vocab: &ClassVocabulary, num_splits: usize, fraction: f64, seed: u64) -> Vec<Vec<String>> {
    let size = ((vocab.len() as f64 * fraction).ceil() as usize).clamp(1, vocab.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_splits)
        .map(|_| {
            let chosen: BTreeSet<&String> = vocab.names.choose_multiple(&mut rng, size).collect();
            vocab.names.iter().filter(|n| chosen.contains(n)).cloned().collect()
        })
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Invalid("no values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Top-1 on the target dataset's test clips over `num_splits` random class
/// subsets of the (overlap-filtered) target vocabulary.
pub fn evaluate_cross_dataset(
    models: &[&DualEncoder],
    source_vocab: &ClassVocabulary,
    target: &Dataset,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let mut warnings = Vec::new();
    let vocab = if config.exclude_overlap {
        let filtered = cross_dataset_vocabulary(&target.vocab, source_vocab, &|s: &str| normalize_class_name(s))?;
        warnings.extend(filtered.warnings);
        filtered.value
    } else {
        target.vocab.clone()
    };
    if vocab.is_empty() {
        return Err(Error::Invalid(
            "target vocabulary is empty after excluding source classes".into(),
        ));
    }
    let loader = target.loader();
    let mut splits = Vec::new();
    for (i, classes) in cross_dataset_splits(&vocab, config.num_splits, config.split_fraction, config.seed)
        .into_iter()
        .enumerate()
    {
        let split_vocab = vocab.subset(&classes)?;
        let entries = Dataset::restrict(&target.test, &classes);
        let top1 = evaluate_top1(models, &entries, &loader, &split_vocab, config)?;
        splits.push(SplitResult {
            name: format!("split{}", i + 1),
            vocab_digest: split_vocab.digest(),
            base: None,
            novel: None,
            hm: None,
            top1: Some(top1),
            num_samples: entries.len(),
        });
    }
    let values: Vec<f64> = splits.iter().filter_map(|s| s.top1).collect();
    let (mean, std) = mean_std(&values)?;
    Ok(EvalReport {
        protocol: Protocol::CrossDataset,
        config_digest: config.digest(),
        model_digests: models.iter().map(|m| m.digest()).collect::<BTreeSet<_>>().into_iter().collect(),
        vocab_digest: vocab.digest(),
        splits,
        aggregate: Aggregate::CrossDataset { mean, std },
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        let l = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        assert_eq!(top1_accuracy(l.view(), &[0, 1, 0]).unwrap(), 100.0);
        assert_eq!(top1_accuracy(l.view(), &[1, 0, 1]).unwrap(), 0.0);
        assert!((top1_accuracy(l.view(), &[0, 1, 1]).unwrap() - 66.667).abs() < 1e-3);
        assert!(top1_accuracy(Array2::<f64>::zeros((0, 2)).view(), &[]).is_err());
        assert_eq!(argmax(array![2.0, 5.0, 5.0].view()), 1);
    }

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(77.8, 64.3).value - 70.4).abs() < 0.05);
        assert!((harmonic_mean(95.3, 80.0).value - 87.0).abs() < 0.05);
        assert_eq!(harmonic_mean(42.0, 42.0).value, 42.0);
        let z = harmonic_mean(0.0, 50.0);
        assert_eq!(z.value, 0.0);
        assert_eq!(z.warnings.len(), 1);
    }

    #[test]
    fn ensemble_examples() {
        let tuned = array![1.0, 2.0];
        let frozen = array![3.0, 1.0];
        let e = ensemble_logits(frozen.view(), tuned.view()).unwrap();
        assert_eq!(e, array![4.0, 3.0]);
        assert_eq!(argmax(tuned.view()), 1);
        assert_eq!(argmax(e.view()), 0);
        assert_eq!(ensemble_logits(frozen.view(), Array1::zeros(2).view()).unwrap(), frozen);
        assert!(ensemble_logits(frozen.view(), array![1.0].view()).is_err());
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[40.0]).unwrap(), (40.0, 0.0));
        assert_eq!(mean_std(&[3.0, 3.0, 3.0]).unwrap(), (3.0, 0.0));
        assert_eq!(mean_std(&[1.0, 3.0]).unwrap(), (2.0, 1.0));
    }

    #[test]
    fn splits_are_seeded_subsets() {
        let v = ClassVocabulary::new((0..8).map(|i| format!("c{i}")).collect()).unwrap();
        let a = cross_dataset_splits(&v, 3, 0.75, 5);
        assert_eq!(a, cross_dataset_splits(&v, 3, 0.75, 5));
        assert!(a.iter().all(|s| s.len() == 6));
        let full = cross_dataset_splits(&v, 3, 1.0, 5);
        assert!(full.iter().all(|s| s == &v.names));
    }

    proptest! {
        #[test]
        fn hm_between_min_and_mean(a in 0.01f64..100.0, b in 0.01f64..100.0) {
            let h = harmonic_mean(a, b).value;
            prop_assert!(h >= a.min(b) - 1e-12 && h <= (a + b) / 2.0 + 1e-12);
        }

        #[test]
        fn ensemble_commutes(a in proptest::collection::vec(-50f64..50.0, 1..10)) {
            let x = Array1::from(a.clone());
            let y = x.mapv(|v| v * 0.3 - 1.0);
            prop_assert_eq!(ensemble_logits(x.view(), y.view()).unwrap(), ensemble_logits(y.view(), x.view()).unwrap());
        }
    }
}
