//! Fast invariant checks run by `resdistill selftest`. Each check is small
//! enough to finish in well under a second.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt;

use crate::analysis::{hausdorff_similarity, HausdorffMode, VocabularyEmbedding};
use crate::datasets::{generate_toy_dataset, make_base_novel_split, ClassVocabulary, PromptMode, SampleMode, ToyRender, ToySpec};
use crate::distillation::{DistillHeads, DistillVariant};
use crate::encoders::{build_toy_dual_encoder, DualEncoder, EncoderConfig, Role, Tokenizer};
use crate::error::Result;
use crate::evaluator::harmonic_mean;
use crate::trainer::{average_checkpoints, compute_step, Batch, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> CheckResult {
    match outcome {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

struct Fixture {
    teacher: DualEncoder,
    batches: Vec<Batch>,
}

fn fixture() -> Result<Fixture> {
    let spec = ToySpec {
        num_classes: 4,
        frequent_train_clips: 2,
        rare_train_clips: 2,
        test_clips: 1,
        frames_per_clip: 4,
        render: ToyRender {
            image_size: 8,
            ..ToyRender::default()
        },
        ..ToySpec::default()
    };
    let ds = generate_toy_dataset(&spec)?;
    let enc = EncoderConfig {
        patch_size: 4,
        image_size: 8,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        temporal_mixing: true,
        ..EncoderConfig::default()
    };
    let teacher = build_toy_dual_encoder(&enc, Role::Teacher)?.with_tokenizer(Tokenizer::from_texts(ds.vocab.all_texts()))?;
    let loader = ds.loader();
    let prompts = ds
        .vocab
        .names
        .iter()
        .map(|n| ds.vocab.render_prompts(n, PromptMode::Train, 0))
        .collect::<Result<Vec<_>>>()?;
    let mut batches = Vec::new();
    for (i, chunk) in ds.train.chunks(3).enumerate() {
        let videos = chunk
            .iter()
            .map(|e| loader.load_sampled(e, 2, SampleMode::Train, i as u64))
            .collect::<Result<Vec<_>>>()?;
        let labels = chunk.iter().map(|e| ds.vocab.index_of(&e.label).expect("label in vocab")).collect();
        batches.push(Batch {
            videos,
            labels,
            class_prompts: prompts.clone(),
        });
    }
    Ok(Fixture { teacher, batches })
}

fn zero_init_identity(fx: &Fixture) -> Result<(bool, String)> {
    let student = DualEncoder::student_from(&fx.teacher)?;
    let cfg = TrainConfig::default();
    let heads = DistillHeads::new(cfg.variant, fx.teacher.config().embed_dim, cfg.alpha, cfg.seed)?;
    let out = compute_step(&student, Some(&fx.teacher), Some(&heads), &fx.batches[0], &cfg)?;
    let l = out.losses;
    Ok((l.fd_v == 0.0 && l.fd_t == 0.0, format!("fd_v = {}, fd_t = {}", l.fd_v, l.fd_t)))
}

fn residual_alpha_zero_is_direct(fx: &Fixture) -> Result<(bool, String)> {
    let mut student = DualEncoder::student_from(&fx.teacher)?;
    // Move the student away from the teacher so the distillation terms are nonzero.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (_, p) in student.params_mut().iter_mut() {
        p.mapv_inplace(|v| v + rng.gen_range(-0.05..0.05));
    }
    let residual = TrainConfig {
        variant: DistillVariant::Residual,
        alpha: 0.0,
        ..TrainConfig::default()
    };
    let direct = TrainConfig {
        variant: DistillVariant::Direct,
        ..residual.clone()
    };
    let c = fx.teacher.config().embed_dim;
    let mut heads = DistillHeads::new(DistillVariant::Residual, c, 0.0, 9)?;
    // A nonzero second layer makes the comparison meaningful beyond zero-init.
    for head in heads.vision.iter_mut().chain(heads.text.iter_mut()) {
        head.weights_mut().1.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
    }
    let none = DistillHeads::new(DistillVariant::Direct, c, 0.0, 9)?;
    let mut checked = 0;
    for b in &fx.batches {
        let r = compute_step(&student, Some(&fx.teacher), Some(&heads), b, &residual)?;
        let d = compute_step(&student, Some(&fx.teacher), Some(&none), b, &direct)?;
        let same_grads = d.grads.iter().all(|(k, g)| r.grads.get(k) == Some(g));
        if r.losses != d.losses || !same_grads {
            return Ok((false, format!("batch {checked} differs")));
        }
        checked += 1;
    }
    Ok((checked > 0, format!("{checked} batches bit-identical")))
}

fn harmonic_mean_values() -> Result<(bool, String)> {
    let a = harmonic_mean(77.8, 64.3).value;
    let b = harmonic_mean(95.3, 80.0).value;
    let ok = (a - 70.4).abs() <= 0.05 && (b - 87.0).abs() <= 0.05;
    Ok((ok, format!("HM(77.8, 64.3) = {a:.3}, HM(95.3, 80.0) = {b:.3}")))
}

fn hausdorff_matches_nested_loops() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let mut set = |n: usize| -> Result<VocabularyEmbedding> {
            let raw = Array2::from_shape_fn((n, 6), |_| rng.gen_range(-1.0..1.0));
            VocabularyEmbedding::new((0..n).map(|i| format!("c{i}")).collect(), raw, "selftest")
        };
        let a = set(1 + trial % 7)?;
        let b = set(1 + trial % 5)?;
        let cos = |x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>| {
            let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
            for i in 0..x.len() {
                xy += x[i] * y[i];
                xx += x[i] * x[i];
                yy += y[i] * y[i];
            }
            xy / (xx * yy).sqrt()
        };
        let directed = |p: &Array2<f64>, q: &Array2<f64>| {
            let mut worst = f64::INFINITY;
            for x in p.rows() {
                let mut best = f64::NEG_INFINITY;
                for y in q.rows() {
                    best = best.max(cos(x, y));
                }
                worst = worst.min(best);
            }
            worst
        };
        let oracle = directed(&a.vectors, &b.vectors).min(directed(&b.vectors, &a.vectors));
        if hausdorff_similarity(&a, &b, HausdorffMode::MinMax)? != oracle
            || hausdorff_similarity(&a, &a, HausdorffMode::MinMax)? != 1.0
        {
            return Ok((false, format!("trial {trial} disagrees")));
        }
    }
    Ok((true, "20 random pairs exact".into()))
}

fn splits_partition() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let k = rng.gen_range(2..30);
        let names: Vec<String> = (0..k).map(|i| format!("class {i}")).collect();
        let vocab = ClassVocabulary::new(names.clone())?;
        let counts: BTreeMap<String, usize> = names.iter().map(|n| (n.clone(), rng.gen_range(0..5))).collect();
        let s = make_base_novel_split(&vocab, &counts, trial)?;
        let mut all: Vec<&String> = s.base.iter().chain(&s.novel).collect();
        all.sort();
        let mut expected: Vec<&String> = names.iter().collect();
        expected.sort();
        if all != expected || s.base.is_empty() || s.novel.is_empty() {
            return Ok((false, format!("trial {trial}: not a partition")));
        }
    }
    Ok((true, "20 random frequency maps".into()))
}

fn averaging_identity(fx: &Fixture) -> Result<(bool, String)> {
    let ck = fx.teacher.to_checkpoint("selftest", serde_json::Value::Null);
    let avg = average_checkpoints(&[ck.clone(), ck.clone(), ck.clone()])?;
    Ok((avg.tensors == ck.tensors, "3 identical checkpoints".into()))
}

/// Runs every check; failures are reported, not raised.
pub fn run_all() -> Vec<CheckResult> {
    let mut out = vec![
        check("harmonic_mean", harmonic_mean_values()),
        check("hausdorff_oracle", hausdorff_matches_nested_loops()),
        check("split_partition", splits_partition()),
    ];
    match fixture() {
        Ok(fx) => {
            out.push(check("zero_init_identity", zero_init_identity(&fx)));
            out.push(check("residual_alpha_zero", residual_alpha_zero_is_direct(&fx)));
            out.push(check("checkpoint_averaging", averaging_identity(&fx)));
        }
        Err(e) => out.push(CheckResult {
            name: "fixture",
            passed: false,
            detail: format!("error: {e}"),
        }),
    }
    out
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for r in super::run_all() {
            assert!(r.passed, "{r}");
        }
    }
}
