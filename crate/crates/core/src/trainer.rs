//! The optimization loop: batches, loss graph, AdamW, schedule, checkpoints,
//! resume and cross-epoch weight averaging.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autograd::{Tape, Var};
use crate::datasets::{ClassVocabulary, FrameLoader, ManifestEntry, PromptMode, SampleMode};
use crate::distillation::{apply_head, fd_graph, DistillHeads, DistillVariant, HeadVars, Reduction};
use crate::encoders::checkpoint::write_atomic;
use crate::encoders::{video_segments, Checkpoint, DualEncoder, Role, VideoTensor};
use crate::error::{Error, Result};
use crate::objective::{logits_graph, DEFAULT_LOGIT_SCALE};
use crate::digest;

/// Which class text features enter the text distillation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TextFdScope {
    /// Every class of the training vocabulary, every step.
    #[default]
    Vocabulary,
    /// Only the classes present in the batch.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub frames_per_clip: usize,
    pub alpha: f64,
    pub beta: f64,
    pub variant: DistillVariant,
    /// Compare unit-normalized features in the distillation losses.
    pub distill_on_normalized: bool,
    /// How per-sample feature distances are combined over the batch.
    pub fd_reduction: Reduction,
    pub text_fd_scope: TextFdScope,
    /// When false no teacher or heads are used at all.
    pub distillation: bool,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub logit_scale: f64,
    pub seed: u64,
}

/// Learning rate used with pretrained full-size weights; toy runs default to [`TOY_BASE_LR`].
pub const PRETRAINED_BASE_LR: f64 = 3.33e-6;
pub const TOY_BASE_LR: f64 = 1e-3;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: TOY_BASE_LR,
            warmup_epochs: 2,
            total_epochs: 12,
            batch_size: 8,
            frames_per_clip: 8,
            alpha: 0.1,
            beta: 2.0,
            variant: DistillVariant::Residual,
            distill_on_normalized: false,
            fd_reduction: Reduction::Mean,
            text_fd_scope: TextFdScope::Vocabulary,
            distillation: true,
            weight_decay: 0.01,
            grad_clip: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            logit_scale: DEFAULT_LOGIT_SCALE,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.total_epochs == 0 {
            return bad("total_epochs must be at least 1");
        }
        if self.warmup_epochs >= self.total_epochs {
            return bad("warmup_epochs must be smaller than total_epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.frames_per_clip == 0 {
            return bad("frames_per_clip must be at least 1");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("alpha and beta must be finite and nonnegative");
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be finite and nonnegative");
        }
        if !(self.logit_scale > 0.0) || !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return bad("logit_scale and grad_clip must be positive, weight_decay nonnegative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps positive");
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        digest::of_json(self)
    }
}

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> Result<f64> {
    if warmup_steps >= total_steps || step > total_steps {
        return Err(Error::Invalid(format!(
            "schedule bounds invalid: step {step}, warmup {warmup_steps}, total {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub fd_v: f64,
    pub fd_t: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub ce: f64,
    pub fd_v: f64,
    pub fd_t: f64,
    pub total: f64,
}

/// Inputs of one optimization step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub videos: Vec<VideoTensor>,
    /// Indices into `class_prompts`.
    pub labels: Vec<usize>,
    /// Prompts of every class in the training vocabulary; a class feature is
    /// the mean embedding of its prompts.
    pub class_prompts: Vec<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub losses: StepLosses,
    /// Gradients of the total loss by parameter name. Distillation head weights
    /// appear as `head.{vision,text}.{W1,W2}`.
    pub grads: BTreeMap<String, Array2<f64>>,
}

fn prompt_tokens(model: &DualEncoder, class_prompts: &[Vec<String>]) -> Result<(Vec<Vec<usize>>, Vec<(usize, usize)>)> {
    let mut seqs = Vec::new();
    let mut segs = Vec::with_capacity(class_prompts.len());
    for prompts in class_prompts {
        if prompts.is_empty() {
            return Err(Error::Invalid("a class has no prompts".into()));
        }
        segs.push((seqs.len(), prompts.len()));
        for p in prompts {
            seqs.push(model.tokenize(p)?.value);
        }
    }
    Ok((seqs, segs))
}

/// Video and class-text features of a frozen model, built with the same graph
/// operations the student uses so identical weights give identical values.
fn frozen_features(
    model: &DualEncoder,
    videos: &[&VideoTensor],
    class_prompts: &[Vec<String>],
) -> Result<(Array2<f64>, Array2<f64>)> {
    let video = frozen_video_features(model, videos)?;
    let text = frozen_text_features(model, class_prompts)?;
    Ok((video, text))
}

fn frozen_video_features(model: &DualEncoder, videos: &[&VideoTensor]) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let mut b = model.binder();
    let out = model.net_for_training().visual(&mut tape, &mut b, videos);
    let pooled = tape.segment_mean(out.frames, video_segments(videos));
    Ok(tape.value(pooled).clone())
}

fn frozen_text_features(model: &DualEncoder, class_prompts: &[Vec<String>]) -> Result<Array2<f64>> {
    let (seqs, segs) = prompt_tokens(model, class_prompts)?;
    let mut tape = Tape::new();
    let mut b = model.binder();
    let rows = model.net_for_training().text(&mut tape, &mut b, &seqs);
    let text = tape.segment_mean(rows, segs);
    Ok(tape.value(text).clone())
}

fn check_batch(student: &DualEncoder, batch: &Batch) -> Result<()> {
    if batch.videos.is_empty() || batch.videos.len() != batch.labels.len() {
        return Err(Error::Invalid(format!(
            "batch has {} videos and {} labels",
            batch.videos.len(),
            batch.labels.len()
        )));
    }
    if let Some(&l) = batch.labels.iter().find(|&&l| l >= batch.class_prompts.len()) {
        return Err(Error::Invalid(format!("label {l} out of range")));
    }
    for v in &batch.videos {
        student.check_video(v)?;
    }
    Ok(())
}

fn compute_with_targets(
    student: &DualEncoder,
    heads: Option<&DistillHeads>,
    batch: &Batch,
    targets: Option<(&Array2<f64>, &Array2<f64>)>,
    config: &TrainConfig,
) -> Result<StepOutput> {
    let videos: Vec<&VideoTensor> = batch.videos.iter().collect();
    let (seqs, segs) = prompt_tokens(student, &batch.class_prompts)?;
    let mut tape = Tape::new();
    let mut b = student.binder();
    let net = student.net_for_training();

    let out = net.visual(&mut tape, &mut b, &videos);
    let video = tape.segment_mean(out.frames, video_segments(&videos));
    let rows = net.text(&mut tape, &mut b, &seqs);
    let text = tape.segment_mean(rows, segs);

    let logits = logits_graph(&mut tape, video, text, config.logit_scale);
    let ce = tape.cross_entropy(logits, batch.labels.clone());

    let mut head_vars: Vec<(&str, HeadVars)> = Vec::new();
    let (mut fd_v, mut fd_t, mut total) = (0.0, 0.0, ce);
    if let Some((tv, tt)) = targets {
        let heads = heads.ok_or_else(|| Error::Invalid("distillation needs heads".into()))?;
        let norm = |tape: &mut Tape, v: Var| {
            if config.distill_on_normalized {
                tape.row_normalize(v)
            } else {
                v
            }
        };
        let (tv, tt) = match config.text_fd_scope {
            TextFdScope::Vocabulary => (tv.clone(), tt.clone()),
            TextFdScope::Batch => {
                let present: Vec<usize> = batch.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
                (tv.clone(), tt.select(ndarray::Axis(0), &present))
            }
        };
        let student_text = match config.text_fd_scope {
            TextFdScope::Vocabulary => text,
            TextFdScope::Batch => {
                let present: Vec<usize> = batch.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
                tape.gather_rows(text, present)
            }
        };
        let mut branch = |tape: &mut Tape, name: &'static str, head: Option<&crate::distillation::DistillHead>, target: Array2<f64>, z: Var| {
            let hv = head.map(|h| HeadVars::bind(tape, h, true));
            if let Some(hv) = hv {
                head_vars.push((name, hv));
            }
            let t = tape.constant(target);
            let t = norm(tape, t);
            let z = norm(tape, z);
            let cand = apply_head(tape, hv, z);
            fd_graph(tape, t, cand, config.fd_reduction)
        };
        let lv = branch(&mut tape, "vision", heads.vision.as_ref(), tv, video);
        let lt = branch(&mut tape, "text", heads.text.as_ref(), tt, student_text);
        fd_v = tape.scalar(lv);
        fd_t = tape.scalar(lt);
        let fd = tape.add(lv, lt);
        let weighted = tape.scale(fd, config.beta);
        total = tape.add(ce, weighted);
    }

    let losses = StepLosses {
        ce: tape.scalar(ce),
        fd_v,
        fd_t,
        total: tape.scalar(total),
    };
    if ![losses.ce, losses.fd_v, losses.fd_t, losses.total].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: 0,
            diagnostics: format!("ce={} fd_v={} fd_t={} total={}", losses.ce, losses.fd_v, losses.fd_t, losses.total),
        });
    }

    let mut g = tape.backward(total);
    let mut grads = BTreeMap::new();
    for (name, var) in &b.vars {
        if tape.requires_grad(*var) {
            let grad = g.take(*var).unwrap_or_else(|| Array2::zeros(tape.value(*var).dim()));
            grads.insert(name.clone(), grad);
        }
    }
    for (branch, hv) in head_vars {
        for (w, var) in [("W1", hv.w1), ("W2", hv.w2)] {
            let grad = g.take(var).unwrap_or_else(|| Array2::zeros(tape.value(var).dim()));
            grads.insert(format!("head.{branch}.{w}"), grad);
        }
    }
    Ok(StepOutput { losses, grads })
}

/// Losses and gradients of one batch without updating anything. The teacher's
/// features are computed on the same batch and treated as constants.
pub fn compute_step(
    student: &DualEncoder,
    teacher: Option<&DualEncoder>,
    heads: Option<&DistillHeads>,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<StepOutput> {
    check_batch(student, batch)?;
    if !config.distillation {
        return compute_with_targets(student, None, batch, None, config);
    }
    let teacher = teacher.ok_or_else(|| Error::Invalid("distillation needs a teacher".into()))?;
    require_role(teacher, Role::Teacher)?;
    let videos: Vec<&VideoTensor> = batch.videos.iter().collect();
    let (tv, tt) = frozen_features(teacher, &videos, &batch.class_prompts)?;
    compute_with_targets(student, heads, batch, Some((&tv, &tt)), config)
}

fn require_role(model: &DualEncoder, role: Role) -> Result<()> {
    if model.role() != role {
        return Err(Error::Role {
            expected: role.to_string(),
            found: model.role().to_string(),
        });
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_gradients(grads: &mut BTreeMap<String, Array2<f64>>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }
    norm
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamW {
    pub t: u64,
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
}

impl AdamW {
    /// Applies one update to every parameter that has a gradient. `decay`
    /// decides per name whether weight decay applies.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, &mut Array2<f64>>,
        grads: &BTreeMap<String, Array2<f64>>,
        lr: f64,
        config: &TrainConfig,
        decay: &dyn Fn(&str) -> bool,
    ) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter {name}")))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let wd = if decay(name) { config.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut **p).and(&mut *m).and(&mut *v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + config.adam_eps);
                *p -= lr * (update + wd * *p);
            });
        }
        Ok(())
    }
}

/// Epoch-level metadata stored in every training checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub global_step: usize,
    pub config_digest: String,
    /// Epoch means of the logged loss components.
    pub metrics: BTreeMap<String, f64>,
}

/// Training examples plus the vocabulary their labels index into.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub manifest: Vec<ManifestEntry>,
    pub vocab: ClassVocabulary,
    pub loader: FrameLoader,
}

impl TrainData {
    fn labels(&self) -> Result<Vec<usize>> {
        self.manifest
            .iter()
            .map(|e| {
                self.vocab
                    .index_of(&e.label)
                    .ok_or_else(|| Error::Invalid(format!("label '{}' not in training vocabulary", e.label)))
            })
            .collect()
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.manifest.len().div_ceil(batch_size)
    }
}

/// Owns the student, heads and optimizer state across steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub student: DualEncoder,
    pub teacher: Option<DualEncoder>,
    pub heads: Option<DistillHeads>,
    pub optim: AdamW,
    pub global_step: usize,
    pub epoch: usize,
    text_cache: Option<(Vec<Vec<String>>, Array2<f64>)>,
}

const EPOCH_PREFIX: &str = "epoch_";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOSS_LOG: &str = "loss_log.jsonl";

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (epoch as u64).wrapping_add(1).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

impl Trainer {
    pub fn new(config: TrainConfig, teacher: Option<DualEncoder>, student: DualEncoder) -> Result<Self> {
        config.validate()?;
        require_role(&student, Role::Student)?;
        let heads = if config.distillation {
            let t = teacher
                .as_ref()
                .ok_or_else(|| Error::Config("distillation is enabled but no teacher was given".into()))?;
            require_role(t, Role::Teacher)?;
            if t.config().embed_dim != student.config().embed_dim {
                return Err(Error::Shape("teacher and student embedding widths differ".into()));
            }
            Some(DistillHeads::new(
                config.variant,
                student.config().embed_dim,
                config.alpha,
                config.seed,
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            student,
            teacher: if heads.is_some() { teacher } else { None },
            heads,
            optim: AdamW::default(),
            global_step: 0,
            epoch: 0,
            text_cache: None,
        })
    }

    fn teacher_text(&mut self, class_prompts: &[Vec<String>]) -> Result<Array2<f64>> {
        if let Some((p, t)) = &self.text_cache {
            if p == class_prompts {
                return Ok(t.clone());
            }
        }
        let teacher = self.teacher.as_ref().expect("teacher present when distilling");
        let t = frozen_text_features(teacher, class_prompts)?;
        self.text_cache = Some((class_prompts.to_vec(), t.clone()));
        Ok(t)
    }

    fn decays(&self, name: &str, dim: (usize, usize)) -> bool {
        if name.ends_with(".W2") && name.starts_with("head.") {
            return !(self.epoch == 0 && self.config.variant == DistillVariant::Residual);
        }
        dim.0 > 1 && dim.1 > 1
    }

    /// One forward/backward pass and optimizer update.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<StepLosses> {
        check_batch(&self.student, batch)?;
        let targets = if self.config.distillation {
            let videos: Vec<&VideoTensor> = batch.videos.iter().collect();
            let tv = frozen_video_features(self.teacher.as_ref().expect("teacher"), &videos)?;
            let tt = self.teacher_text(&batch.class_prompts)?;
            Some((tv, tt))
        } else {
            None
        };
        let out = compute_with_targets(
            &self.student,
            self.heads.as_ref(),
            batch,
            targets.as_ref().map(|(a, b)| (a, b)),
            &self.config,
        )
        .map_err(|e| match e {
            Error::NonFiniteLoss { diagnostics, .. } => Error::NonFiniteLoss {
                step: self.global_step,
                diagnostics,
            },
            e => e,
        })?;
        let mut grads = out.grads;
        clip_gradients(&mut grads, self.config.grad_clip);

        let decay: BTreeMap<String, bool> = grads
            .iter()
            .map(|(n, g)| (n.clone(), self.decays(n, g.dim())))
            .collect();
        let mut params: BTreeMap<String, &mut Array2<f64>> = BTreeMap::new();
        for (name, p) in self.student.params_mut().iter_mut() {
            if grads.contains_key(name) {
                params.insert(name.clone(), p);
            }
        }
        if let Some(h) = self.heads.as_mut() {
            for (branch, head) in [("vision", h.vision.as_mut()), ("text", h.text.as_mut())] {
                if let Some(head) = head {
                    let (w1, w2) = head.weights_mut();
                    params.insert(format!("head.{branch}.W1"), w1);
                    params.insert(format!("head.{branch}.W2"), w2);
                }
            }
        }
        self.optim
            .step(&mut params, &grads, lr, &self.config, &|n| decay.get(n).copied().unwrap_or(false))?;
        self.global_step += 1;
        Ok(out.losses)
    }

    /// Batches of one epoch, as `(manifest indices, frame seeds, prompt seed)`.
    fn epoch_plan(&self, n: usize) -> Vec<(Vec<usize>, Vec<u64>, u64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(self.config.seed, self.epoch));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
            .chunks(self.config.batch_size)
            .map(|c| {
                let seeds = c.iter().map(|_| rng.gen()).collect();
                (c.to_vec(), seeds, rng.gen())
            })
            .collect()
    }

    /// Runs one epoch, returning its loss records.
    pub fn run_epoch(&mut self, data: &TrainData) -> Result<Vec<LossRecord>> {
        if data.manifest.is_empty() {
            return Err(Error::Invalid("training manifest is empty".into()));
        }
        let labels = data.labels()?;
        let per_epoch = data.steps_per_epoch(self.config.batch_size);
        let total = per_epoch * self.config.total_epochs;
        let warmup = per_epoch * self.config.warmup_epochs;
        let mut records = Vec::with_capacity(per_epoch);
        for (idx, frame_seeds, prompt_seed) in self.epoch_plan(data.manifest.len()) {
            let mut videos = Vec::with_capacity(idx.len());
            for (&i, &s) in idx.iter().zip(&frame_seeds) {
                videos.push(data.loader.load_sampled(&data.manifest[i], self.config.frames_per_clip, SampleMode::Train, s)?);
            }
            let class_prompts = data
                .vocab
                .names
                .iter()
                .enumerate()
                .map(|(k, name)| data.vocab.render_prompts(name, PromptMode::Train, prompt_seed ^ k as u64))
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch {
                videos,
                labels: idx.iter().map(|&i| labels[i]).collect(),
                class_prompts,
            };
            let lr = cosine_lr(self.global_step.min(total), total, warmup, self.config.base_lr)?;
            let step = self.global_step;
            let l = self.train_step(&batch, lr)?;
            log::debug!("step {step} lr {lr:.3e} ce {:.4} fd_v {:.4} fd_t {:.4}", l.ce, l.fd_v, l.fd_t);
            records.push(LossRecord {
                step,
                lr,
                ce: l.ce,
                fd_v: l.fd_v,
                fd_t: l.fd_t,
                total: l.total,
            });
        }
        self.epoch += 1;
        Ok(records)
    }

    fn teacher_digest(&self) -> Option<String> {
        self.teacher.as_ref().map(|t| t.digest())
    }

    /// Student, heads and optimizer state for resuming.
    pub fn to_checkpoint(&self, meta: &CheckpointMeta) -> Checkpoint {
        let extra = serde_json::json!({
            "train": meta,
            "adam_t": self.optim.t,
            "teacher_digest": self.teacher_digest(),
        });
        let mut ck = self.student.to_checkpoint(&self.config.digest(), extra);
        if let Some(h) = &self.heads {
            ck.tensors.extend(h.to_tensors());
        }
        for (n, m) in &self.optim.m {
            ck.tensors.insert(format!("optim.m.{n}"), m.clone());
        }
        for (n, v) in &self.optim.v {
            ck.tensors.insert(format!("optim.v.{n}"), v.clone());
        }
        ck
    }

    /// Restores state written by [`Trainer::to_checkpoint`] under the same config and teacher.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<CheckpointMeta> {
        if ck.manifest.config_digest != self.config.digest() {
            return Err(Error::DigestMismatch {
                expected: self.config.digest(),
                found: ck.manifest.config_digest.clone(),
            });
        }
        let extra = &ck.manifest.extra["meta"];
        let meta: CheckpointMeta = serde_json::from_value(extra["train"].clone())?;
        let saved_teacher: Option<String> = serde_json::from_value(extra["teacher_digest"].clone())?;
        if saved_teacher != self.teacher_digest() {
            return Err(Error::DigestMismatch {
                expected: self.teacher_digest().unwrap_or_default(),
                found: saved_teacher.unwrap_or_default(),
            });
        }
        self.student = DualEncoder::from_checkpoint(ck)?;
        if self.heads.is_some() {
            self.heads = Some(DistillHeads::from_tensors(self.config.variant, self.config.alpha, &ck.tensors)?);
        }
        let mut optim = AdamW {
            t: serde_json::from_value(extra["adam_t"].clone())?,
            ..AdamW::default()
        };
        for (name, t) in &ck.tensors {
            if let Some(n) = name.strip_prefix("optim.m.") {
                optim.m.insert(n.to_string(), t.clone());
            } else if let Some(n) = name.strip_prefix("optim.v.") {
                optim.v.insert(n.to_string(), t.clone());
            }
        }
        self.optim = optim;
        self.global_step = meta.global_step;
        self.epoch = meta.epoch;
        self.text_cache = None;
        Ok(meta)
    }

    /// The trained student alone, as written to the final checkpoint.
    pub fn final_checkpoint(&self, meta: &CheckpointMeta) -> Checkpoint {
        let extra = serde_json::json!({ "train": meta, "teacher_digest": self.teacher_digest() });
        let mut ck = self.student.to_checkpoint(&self.config.digest(), extra);
        if let Some(h) = &self.heads {
            ck.tensors.extend(h.to_tensors());
        }
        ck
    }
}

pub fn epoch_checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("{EPOCH_PREFIX}{epoch:03}.ckpt"))
}

/// Epoch checkpoints present in `out_dir`, in epoch order.
pub fn list_epoch_checkpoints(out_dir: &Path) -> Result<Vec<PathBuf>> {
    if !out_dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<(usize, PathBuf)> = fs::read_dir(out_dir)
        .map_err(|e| Error::io(out_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?;
            let n = name.strip_prefix(EPOCH_PREFIX)?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((n, p))
        })
        .collect();
    out.sort();
    Ok(out.into_iter().map(|(_, p)| p).collect())
}

fn write_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn epoch_metrics(records: &[LossRecord]) -> BTreeMap<String, f64> {
    let n = records.len().max(1) as f64;
    let mean = |f: fn(&LossRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    BTreeMap::from([
        ("ce".to_string(), mean(|r| r.ce)),
        ("fd_v".to_string(), mean(|r| r.fd_v)),
        ("fd_t".to_string(), mean(|r| r.fd_t)),
        ("total".to_string(), mean(|r| r.total)),
    ])
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<CheckpointMeta>,
    pub student: DualEncoder,
    pub heads: Option<DistillHeads>,
    pub records: Vec<LossRecord>,
}

/// Runs the full schedule, writing `epoch_NNN.ckpt` after every epoch, the loss
/// log, and `final.ckpt`. If `out_dir` already holds epoch checkpoints from the
/// same config and teacher, training resumes after the latest one.
pub fn train_run(
    config: &TrainConfig,
    teacher: Option<&DualEncoder>,
    student: DualEncoder,
    data: &TrainData,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    run_schedule(config, teacher, student, data, Some(out_dir))
}

/// As [`train_run`] without touching the filesystem.
pub fn train_in_memory(
    config: &TrainConfig,
    teacher: Option<&DualEncoder>,
    student: DualEncoder,
    data: &TrainData,
) -> Result<TrainOutcome> {
    run_schedule(config, teacher, student, data, None)
}

fn run_schedule(
    config: &TrainConfig,
    teacher: Option<&DualEncoder>,
    student: DualEncoder,
    data: &TrainData,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), teacher.cloned(), student)?;
    let mut metas = Vec::new();
    let mut records = Vec::new();

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let existing = list_epoch_checkpoints(dir)?;
        if let Some(last) = existing.last() {
            let meta = trainer.restore(&Checkpoint::load(last)?)?;
            log::info!("resuming after epoch {} (step {})", meta.epoch, meta.global_step);
            for p in &existing {
                let ck = Checkpoint::load(p)?;
                metas.push(serde_json::from_value(ck.manifest.extra["meta"]["train"].clone())?);
            }
            let log_path = dir.join(LOSS_LOG);
            if log_path.exists() {
                records = read_loss_log(&log_path)?;
                records.retain(|r| r.step < meta.global_step);
            }
        }
    }

    while trainer.epoch < config.total_epochs {
        let epoch_records = trainer.run_epoch(data)?;
        let meta = CheckpointMeta {
            epoch: trainer.epoch,
            global_step: trainer.global_step,
            config_digest: config.digest(),
            metrics: epoch_metrics(&epoch_records),
        };
        log::info!(
            "epoch {}/{}: ce {:.4} fd_v {:.4} fd_t {:.4}",
            meta.epoch,
            config.total_epochs,
            meta.metrics["ce"],
            meta.metrics["fd_v"],
            meta.metrics["fd_t"]
        );
        records.extend(epoch_records);
        if let Some(dir) = out_dir {
            trainer.to_checkpoint(&meta).save(&epoch_checkpoint_path(dir, meta.epoch))?;
            write_loss_log(&dir.join(LOSS_LOG), &records)?;
        }
        metas.push(meta);
    }
    if let Some(dir) = out_dir {
        let last = metas.last().cloned().expect("at least one epoch");
        trainer.final_checkpoint(&last).save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        checkpoints: metas,
        student: trainer.student,
        heads: trainer.heads,
        records,
    })
}

/// Parameter-wise mean of checkpoints sharing a config digest. Optimizer
/// state is dropped. The mean is accumulated incrementally, so averaging
/// identical checkpoints returns them unchanged bit for bit.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Invalid("no checkpoints to average".into()))?;
    let mut out = Checkpoint {
        manifest: first.manifest.clone(),
        tensors: first
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("optim."))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect(),
    };
    for (i, ck) in checkpoints.iter().enumerate().skip(1) {
        if ck.manifest.config_digest != first.manifest.config_digest {
            return Err(Error::DigestMismatch {
                expected: first.manifest.config_digest.clone(),
                found: ck.manifest.config_digest.clone(),
            });
        }
        let k = (i + 1) as f64;
        for (name, acc) in out.tensors.iter_mut() {
            let t = ck
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint {i} lacks tensor {name}")))?;
            if t.dim() != acc.dim() {
                return Err(Error::Checkpoint(format!("tensor {name} shape differs in checkpoint {i}")));
            }
            ndarray::Zip::from(acc).and(t).for_each(|a, &x| *a += (x - *a) / k);
        }
    }
    Ok(out)
}
