//! End-to-end toy benchmark: pretrain an image-text teacher on single frames
//! of the whole toy lexicon, fine-tune students on the frequent (base) classes
//! with different distillation settings, and measure how much of the teacher's
//! knowledge of the rare (novel) classes survives.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::datasets::toy::{ToyWorld, LEXICON_SIZE};
use crate::datasets::{
    class_counts, generate_toy_dataset, make_base_novel_split, sample_few_shot, Dataset, FrameLoader, ToyRender,
    ToySpec, VocabSplit,
};
use crate::distillation::DistillVariant;
use crate::encoders::{build_toy_dual_encoder, DualEncoder, EncoderConfig, Role, TemporalInit, Tokenizer};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_top1, feature_drift, EvalConfig};
use crate::trainer::{train_in_memory, TrainConfig, TrainData};

/// Tokenizer covering every lexicon class name and the default prompt template.
pub fn toy_tokenizer() -> Tokenizer {
    let vocab = ToyWorld::lexicon_vocabulary();
    let provider = crate::datasets::TemplateProvider::default();
    let texts: Vec<&str> = vocab.all_texts().chain(std::iter::once(provider.template.as_str())).collect();
    Tokenizer::from_texts(texts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub clips_per_class: usize,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            clips_per_class: 16,
            train: TrainConfig {
                base_lr: 3e-3,
                warmup_epochs: 1,
                total_epochs: 60,
                batch_size: 32,
                frames_per_clip: 1,
                distillation: false,
                ..TrainConfig::default()
            },
        }
    }
}

/// Encoder used by the toy benchmark: small enough for a single CPU core.
pub fn benchmark_encoder() -> EncoderConfig {
    EncoderConfig {
        patch_size: 8,
        image_size: 32,
        embed_dim: 32,
        depth: 2,
        heads: 2,
        mlp_ratio: 4,
        text_vocab_size: 64,
        max_text_len: 16,
        temporal_mixing: true,
        temporal_init: TemporalInit::Zero,
        record_attention: true,
        seed: 0,
    }
}

/// Trains an image-text model on single frames of every lexicon class with
/// the cross-entropy objective and returns it frozen as a teacher.
pub fn pretrain_teacher(encoder: &EncoderConfig, render: &ToyRender, config: &PretrainConfig) -> Result<DualEncoder> {
    let model = build_toy_dual_encoder(encoder, Role::Teacher)?
        .with_tokenizer(toy_tokenizer())?
        .into_trainable_student();
    let world = ToyWorld::new(render.clone());
    let data = TrainData {
        manifest: world.lexicon_manifest(config.clips_per_class, 16, config.train.seed ^ 0x5eed),
        vocab: ToyWorld::lexicon_vocabulary(),
        loader: FrameLoader::toy(world),
    };
    let cfg = TrainConfig {
        distillation: false,
        ..config.train.clone()
    };
    let out = train_in_memory(&cfg, None, model, &data)?;
    Ok(out.student.into_teacher())
}

/// A student training recipe evaluated by the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub name: String,
    pub variant: DistillVariant,
    pub beta: f64,
    pub alpha: f64,
}

impl Recipe {
    pub fn new(name: &str, variant: DistillVariant, beta: f64, alpha: f64) -> Self {
        Self {
            name: name.into(),
            variant,
            beta,
            alpha,
        }
    }

    /// Residual (β=2, α=0.1), projector (β=2) and undistilled (β=0).
    pub fn standard() -> Vec<Recipe> {
        vec![
            Recipe::new("residual", DistillVariant::Residual, 2.0, 0.1),
            Recipe::new("projector", DistillVariant::Projector, 2.0, 0.1),
            Recipe::new("beta0", DistillVariant::Residual, 0.0, 0.1),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub encoder: EncoderConfig,
    pub dataset: ToySpec,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Clips per base class used for fine-tuning.
    pub few_shot: usize,
    pub seeds: Vec<u64>,
    pub recipes: Vec<Recipe>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            encoder: benchmark_encoder(),
            dataset: ToySpec::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig {
                total_epochs: 12,
                warmup_epochs: 2,
                batch_size: 8,
                frames_per_clip: 8,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            few_shot: 16,
            seeds: vec![1, 2, 3],
            recipes: Recipe::standard(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeResult {
    /// Top-1 on the few-shot training clips, over the base vocabulary.
    pub base_train: f64,
    pub base_test: f64,
    pub novel_test: f64,
    /// Mean L2 distance to the teacher's video features on novel-class test clips.
    pub novel_drift: f64,
    /// Novel top-1 of the logit-sum ensemble with the teacher.
    pub novel_ensemble: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub split: VocabSplit,
    pub teacher: RecipeResult,
    pub recipes: BTreeMap<String, RecipeResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub teacher_digest: String,
    pub seeds: Vec<SeedResult>,
}

/// Everything shared by the runs of one benchmark.
pub struct BenchmarkSetup {
    pub teacher: DualEncoder,
    pub dataset: Dataset,
}

pub fn prepare_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkSetup> {
    if config.dataset.render.image_size != config.encoder.image_size {
        return Err(Error::Config("toy image_size must match the encoder image_size".into()));
    }
    if LEXICON_SIZE == 0 {
        return Err(Error::Config("empty lexicon".into()));
    }
    let teacher = pretrain_teacher(&config.encoder, &config.dataset.render, &config.pretrain)?;
    let dataset = generate_toy_dataset(&config.dataset)?;
    Ok(BenchmarkSetup { teacher, dataset })
}

fn score(
    models: &[&DualEncoder],
    teacher: &DualEncoder,
    setup: &BenchmarkSetup,
    split: &VocabSplit,
    train: &[crate::datasets::ManifestEntry],
    config: &BenchmarkConfig,
) -> Result<RecipeResult> {
    let ds = &setup.dataset;
    let loader = ds.loader();
    let base_vocab = ds.vocab.subset(&split.base)?;
    let novel_vocab = ds.vocab.subset(&split.novel)?;
    let base_test = Dataset::restrict(&ds.test, &split.base);
    let novel_test = Dataset::restrict(&ds.test, &split.novel);
    let ev = &config.eval;
    let student = models[0];
    Ok(RecipeResult {
        base_train: evaluate_top1(models, train, &loader, &base_vocab, ev)?,
        base_test: evaluate_top1(models, &base_test, &loader, &base_vocab, ev)?,
        novel_test: evaluate_top1(models, &novel_test, &loader, &novel_vocab, ev)?,
        novel_drift: feature_drift(teacher, student, &novel_test, &loader, ev.frames_per_clip)?,
        novel_ensemble: evaluate_top1(&[teacher, student], &novel_test, &loader, &novel_vocab, ev)?,
    })
}

/// Trains and scores every recipe for one seed.
pub fn run_seed(setup: &BenchmarkSetup, config: &BenchmarkConfig, seed: u64) -> Result<SeedResult> {
    let ds = &setup.dataset;
    let split = make_base_novel_split(&ds.vocab, &class_counts(&ds.train), seed)?;
    let train = sample_few_shot(&ds.train, &split.base, config.few_shot, seed).value;
    let data = TrainData {
        manifest: train.clone(),
        vocab: ds.vocab.subset(&split.base)?,
        loader: ds.loader(),
    };
    let teacher = &setup.teacher;
    let teacher_result = score(&[teacher], teacher, setup, &split, &train, config)?;
    let mut recipes = BTreeMap::new();
    for r in &config.recipes {
        let cfg = TrainConfig {
            variant: r.variant,
            beta: r.beta,
            alpha: r.alpha,
            seed,
            ..config.train.clone()
        };
        let student = DualEncoder::student_from(teacher)?;
        let out = train_in_memory(&cfg, Some(teacher), student, &data)?;
        let result = score(&[&out.student], teacher, setup, &split, &train, config)?;
        log::info!("seed {seed} {}: {result:?}", r.name);
        recipes.insert(r.name.clone(), result);
    }
    Ok(SeedResult {
        seed,
        split,
        teacher: teacher_result,
        recipes,
    })
}

pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    let setup = prepare_benchmark(config)?;
    let seeds = config
        .seeds
        .iter()
        .map(|&s| run_seed(&setup, config, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkReport {
        teacher_digest: setup.teacher.digest(),
        seeds,
    })
}
