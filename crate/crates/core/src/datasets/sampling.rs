//! Frame sampling, base/novel splitting and few-shot subsampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use super::{ClassVocabulary, ManifestEntry};
use crate::error::{Error, Result, Warned, Warning};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleMode {
    /// One uniformly random frame per segment.
    Train,
    /// A fixed position per segment; view `clip` of `views` sits at fraction
    /// `(clip + 1) / (views + 1)` of the segment, so a single view is centered.
    Eval { clip: usize, views: usize },
}

impl SampleMode {
    pub fn centered() -> Self {
        Self::Eval { clip: 0, views: 1 }
    }
}

/// Splits `[0, num_frames)` into `n` equal segments and picks one index per
/// segment. When `n > num_frames` indices repeat (short videos are upsampled).
pub fn sample_frames(num_frames: usize, n: usize, mode: SampleMode, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Invalid("must sample at least one frame".into()));
    }
    if num_frames == 0 {
        return Err(Error::Invalid("video has no frames".into()));
    }
    let nf = num_frames as f64;
    let pick = |i: usize, frac: f64| -> usize {
        let pos = (nf * (i as f64 + frac) / n as f64).floor() as usize;
        pos.min(num_frames - 1)
    };
    match mode {
        SampleMode::Train => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..n).map(|i| pick(i, rng.gen_range(0.0..1.0))).collect())
        }
        SampleMode::Eval { clip, views } => {
            if views == 0 || clip >= views {
                return Err(Error::Invalid(format!("clip index {clip} invalid for {views} views")));
            }
            let frac = (clip + 1) as f64 / (views + 1) as f64;
            Ok((0..n).map(|i| pick(i, frac)).collect())
        }
    }
}

/// A partition of (part of) a vocabulary into base and novel classes. Both
/// lists keep vocabulary order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabSplit {
    pub base: Vec<String>,
    pub novel: Vec<String>,
    pub seed: u64,
    pub vocab_digest: String,
}

impl VocabSplit {
    pub fn validate(&self, vocab: &ClassVocabulary) -> Result<()> {
        let b: BTreeSet<&String> = self.base.iter().collect();
        if self.novel.iter().any(|n| b.contains(n)) {
            return Err(Error::Invalid("base and novel sets overlap".into()));
        }
        if let Some(c) = self.base.iter().chain(&self.novel).find(|c| !vocab.contains(c)) {
            return Err(Error::Invalid(format!("split class '{c}' not in vocabulary")));
        }
        Ok(())
    }
}

/// Ranks classes by descending count (ties lexicographic) and assigns the top
/// half (rounded down, at least one) to base. A nonzero seed shuffles classes
/// inside each tie group before the cut, which is the only way seeds differ.
pub fn make_base_novel_split(
    vocab: &ClassVocabulary,
    counts: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<VocabSplit> {
    if vocab.len() < 2 {
        return Err(Error::Invalid("need at least two classes to split".into()));
    }
    if let Some(missing) = vocab.names.iter().find(|n| !counts.contains_key(*n)) {
        return Err(Error::Invalid(format!("no count for class '{missing}'")));
    }
    let mut ranked: Vec<(&String, usize)> = vocab.names.iter().map(|n| (n, counts[n])).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if seed != 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut start = 0;
        while start < ranked.len() {
            let end = ranked[start..]
                .iter()
                .position(|r| r.1 != ranked[start].1)
                .map_or(ranked.len(), |p| start + p);
            ranked[start..end].shuffle(&mut rng);
            start = end;
        }
    }
    let cut = (vocab.len() / 2).max(1);
    let base: BTreeSet<&String> = ranked[..cut].iter().map(|r| r.0).collect();
    let (b, n): (Vec<String>, Vec<String>) = vocab.names.iter().cloned().partition(|c| base.contains(c));
    Ok(VocabSplit {
        base: b,
        novel: n,
        seed,
        vocab_digest: vocab.digest(),
    })
}

/// Up to `k` clips per base class, without replacement. Output keeps manifest order.
pub fn sample_few_shot(
    manifest: &[ManifestEntry],
    base_classes: &[String],
    k: usize,
    seed: u64,
) -> Warned<Vec<ManifestEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = BTreeSet::new();
    let mut warnings = Vec::new();
    for class in base_classes {
        let idx: Vec<usize> = manifest
            .iter()
            .enumerate()
            .filter(|(_, e)| &e.label == class)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            warnings.push(Warning::EmptyClassSkipped { class: class.clone() });
            continue;
        }
        chosen.extend(idx.choose_multiple(&mut rng, k.min(idx.len())).copied());
    }
    Warned::with(chosen.into_iter().map(|i| manifest[i].clone()).collect(), warnings)
}

/// Number of manifest entries per label.
pub fn class_counts(manifest: &[ManifestEntry]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for e in manifest {
        *out.entry(e.label.clone()).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn eval_sampling_examples() {
        assert_eq!(
            sample_frames(16, 8, SampleMode::centered(), 0).unwrap(),
            vec![1, 3, 5, 7, 9, 11, 13, 15]
        );
        assert_eq!(
            sample_frames(8, 8, SampleMode::centered(), 0).unwrap(),
            (0..8).collect::<Vec<_>>()
        );
        let up = sample_frames(4, 8, SampleMode::centered(), 0).unwrap();
        for f in 0..4 {
            assert_eq!(up.iter().filter(|&&i| i == f).count(), 2);
        }
    }

    #[test]
    fn views_shift_within_segments() {
        let views: Vec<Vec<usize>> = (0..3)
            .map(|c| sample_frames(32, 8, SampleMode::Eval { clip: c, views: 3 }, 0).unwrap())
            .collect();
        assert_eq!(views[0][0], 1);
        assert_eq!(views[1][0], 2);
        assert_eq!(views[2][0], 3);
        assert!(sample_frames(32, 8, SampleMode::Eval { clip: 3, views: 3 }, 0).is_err());
        assert!(sample_frames(32, 0, SampleMode::Train, 0).is_err());
    }

    #[test]
    fn train_sampling_is_seeded_and_in_segments() {
        let a = sample_frames(40, 8, SampleMode::Train, 11).unwrap();
        assert_eq!(a, sample_frames(40, 8, SampleMode::Train, 11).unwrap());
        for (i, &f) in a.iter().enumerate() {
            assert!(f >= i * 5 && f < (i + 1) * 5);
        }
    }

    fn vocab(names: &[&str]) -> ClassVocabulary {
        ClassVocabulary::new(names.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn split_by_frequency() {
        let v = vocab(&["a", "b", "c", "d"]);
        let counts: BTreeMap<String, usize> =
            [("a", 10), ("b", 5), ("c", 8), ("d", 1)].iter().map(|(k, c)| (k.to_string(), *c)).collect();
        let s = make_base_novel_split(&v, &counts, 0).unwrap();
        assert_eq!(s.base, vec!["a", "c"]);
        assert_eq!(s.novel, vec!["b", "d"]);

        let equal: BTreeMap<String, usize> = v.names.iter().map(|n| (n.clone(), 3)).collect();
        let s = make_base_novel_split(&v, &equal, 0).unwrap();
        assert_eq!(s.base, vec!["a", "b"]);
        assert_eq!(s, make_base_novel_split(&v, &equal, 0).unwrap());
        assert!(make_base_novel_split(&vocab(&["solo"]), &equal, 0).is_err());
    }

    #[test]
    fn seeds_only_perturb_tie_groups() {
        let v = vocab(&["a", "b", "c", "d", "e", "f"]);
        let counts: BTreeMap<String, usize> = [("a", 9), ("b", 5), ("c", 5), ("d", 5), ("e", 5), ("f", 1)]
            .iter()
            .map(|(k, c)| (k.to_string(), *c))
            .collect();
        for seed in 0..5 {
            let s = make_base_novel_split(&v, &counts, seed).unwrap();
            assert!(s.base.contains(&"a".to_string()));
            assert!(s.novel.contains(&"f".to_string()));
        }
    }

    fn entries(spec: &[(&str, usize)]) -> Vec<ManifestEntry> {
        let mut out = Vec::new();
        for (label, n) in spec {
            for i in 0..*n {
                out.push(ManifestEntry {
                    clip_id: format!("{label}-{i}"),
                    frame_source: format!("dir:{label}/{i}"),
                    num_frames: 8,
                    label: label.to_string(),
                });
            }
        }
        out
    }

    #[test]
    fn few_shot_clamps_and_reproduces() {
        let m = entries(&[("a", 100), ("b", 5)]);
        let classes = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let out = sample_few_shot(&m, &classes, 16, 4);
        let a: BTreeSet<_> = out.value.iter().filter(|e| e.label == "a").map(|e| &e.clip_id).collect();
        assert_eq!(a.len(), 16);
        assert_eq!(out.value.iter().filter(|e| e.label == "b").count(), 5);
        assert_eq!(out.warnings, vec![Warning::EmptyClassSkipped { class: "c".into() }]);
        assert_eq!(out.value, sample_few_shot(&m, &classes, 16, 4).value);
    }

    proptest! {
        #[test]
        fn splits_partition(counts in proptest::collection::vec(0usize..6, 2..30), seed in 0u64..4) {
            let names: Vec<String> = (0..counts.len()).map(|i| format!("c{i}")).collect();
            let v = ClassVocabulary::new(names.clone()).unwrap();
            let map: BTreeMap<String, usize> = names.iter().cloned().zip(counts).collect();
            let s = make_base_novel_split(&v, &map, seed).unwrap();
            let b: BTreeSet<_> = s.base.iter().collect();
            let n: BTreeSet<_> = s.novel.iter().collect();
            prop_assert!(b.is_disjoint(&n));
            prop_assert_eq!(b.len() + n.len(), names.len());
            s.validate(&v).unwrap();
        }

        #[test]
        fn sampling_nondecreasing(nf in 1usize..64, n in 1usize..20, seed in 0u64..100) {
            for mode in [SampleMode::Train, SampleMode::centered(), SampleMode::Eval { clip: 2, views: 3 }] {
                let idx = sample_frames(nf, n, mode, seed).unwrap();
                prop_assert_eq!(idx.len(), n);
                prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(idx.iter().all(|&i| i < nf));
            }
        }
    }
}
