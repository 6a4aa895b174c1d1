//! Toy vision-language dual encoder: frame-wise ViT visual tower with a global
//! token, transformer text tower, optional cross-frame mixing for students and
//! optional bottleneck adapters.

pub mod checkpoint;
pub(crate) mod network;
pub mod tokenizer;

use ndarray::{Array1, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::autograd::Tape;
use crate::digest;
use crate::error::{Error, Result, Warned, Warning};
pub use checkpoint::{Checkpoint, CheckpointManifest};
use network::{Binder, Net};
pub use tokenizer::Tokenizer;

/// Videos per forward pass during batched inference.
const INFERENCE_CHUNK: usize = 16;

/// `T × 3 × H × W` frames with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    frames: Array4<f64>,
}

impl VideoTensor {
    pub fn new(frames: Array4<f64>) -> Result<Self> {
        let (t, ch, h, w) = frames.dim();
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty video {t}x{ch}x{h}x{w}")));
        }
        if ch != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {ch}")));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("video frames".into()));
        }
        if frames.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().2
    }

    pub fn width(&self) -> usize {
        self.frames.dim().3
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.frames
    }

    /// A new clip made of the given frame indices (repeats allowed).
    pub fn select_frames(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Invalid("no frame indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.num_frames()) {
            return Err(Error::Invalid(format!(
                "frame index {bad} out of range for {} frames",
                self.num_frames()
            )));
        }
        Ok(Self {
            frames: self.frames.select(Axis(0), indices),
        })
    }
}

/// One global-token embedding per frame, `T × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub features: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Array1<f64>,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Self {
            values,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalize(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::Invalid("cannot normalize a zero-norm embedding".into()));
        }
        Ok(Self {
            values: &self.values / n,
            normalized: true,
        })
    }
}

/// Arithmetic mean of the frame rows, unnormalized.
pub fn pool_frames(features: &FrameFeatures) -> Result<EmbeddingVector> {
    let f = &features.features;
    if f.nrows() == 0 {
        return Err(Error::Invalid("cannot pool zero frames".into()));
    }
    EmbeddingVector::new(f.sum_axis(Axis(0)) / f.nrows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        })
    }
}

/// Initialization of the student's cross-frame mixing output projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemporalInit {
    /// Output projection starts at zero, so the student starts exactly at the teacher.
    #[default]
    Zero,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Visual,
    Text,
    Temporal,
    Adapter,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        match name.split('.').next()? {
            "visual" => Some(Self::Visual),
            "text" => Some(Self::Text),
            "temporal" => Some(Self::Temporal),
            "adapter" => Some(Self::Adapter),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    /// Frames must be `image_size × image_size`.
    pub image_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub text_vocab_size: usize,
    /// Maximum token count including the end-of-text marker.
    pub max_text_len: usize,
    /// Students only: add a cross-frame attention layer after the frame encoder.
    pub temporal_mixing: bool,
    pub temporal_init: TemporalInit,
    pub record_attention: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            image_size: 32,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            text_vocab_size: 256,
            max_text_len: 32,
            temporal_mixing: false,
            temporal_init: TemporalInit::Zero,
            record_attention: true,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.depth == 0 {
            return bad("depth must be >= 1");
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be a positive multiple of heads");
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad("image_size must be a positive multiple of patch_size");
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be >= 1");
        }
        if self.text_vocab_size < 3 {
            return bad("text_vocab_size must cover the special tokens");
        }
        if self.max_text_len < 2 {
            return bad("max_text_len must be >= 2");
        }
        Ok(())
    }

    pub fn patches_per_frame(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn digest(&self) -> String {
        digest::of_json(self)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: String, value: Array2<f64>) {
        self.tensors.insert(name, value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

/// Architecture and bookkeeping stored in a checkpoint manifest next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelSpec {
    config: EncoderConfig,
    role: Role,
    temporal: bool,
    adapter_width: Option<usize>,
    trainable: BTreeSet<ParamGroup>,
    tokenizer: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    config: EncoderConfig,
    role: Role,
    params: ParamStore,
    trainable: BTreeSet<ParamGroup>,
    temporal: bool,
    adapter_width: Option<usize>,
    tokenizer: Tokenizer,
}

/// Builds a seeded toy dual encoder. Teacher and student builds of the same
/// seed share bit-identical backbone weights; a student additionally gets the
/// cross-frame mixing layer when `config.temporal_mixing` is set.
pub fn build_toy_dual_encoder(config: &EncoderConfig, role: Role) -> Result<DualEncoder> {
    config.validate()?;
    let mut params = network::init_backbone(config);
    let temporal = role == Role::Student && config.temporal_mixing;
    if temporal {
        network::init_temporal(config, config.temporal_init, &mut params);
    }
    let trainable = match role {
        Role::Teacher => BTreeSet::new(),
        Role::Student => {
            let mut g = BTreeSet::from([ParamGroup::Visual, ParamGroup::Text]);
            if temporal {
                g.insert(ParamGroup::Temporal);
            }
            g
        }
    };
    Ok(DualEncoder {
        config: config.clone(),
        role,
        params,
        trainable,
        temporal,
        adapter_width: None,
        tokenizer: Tokenizer::from_words(
            ["<pad>", "<unk>", "<eot>"].iter().map(|s| s.to_string()).collect(),
        ),
    })
}

/// Freezes the backbone and inserts trainable bottleneck adapters whose
/// up-projections start at zero, so outputs are unchanged at wrap time.
pub fn wrap_with_adapters(model: &DualEncoder, bottleneck_width: usize) -> Result<DualEncoder> {
    if model.role != Role::Student {
        return Err(Error::Role {
            expected: "student".into(),
            found: model.role.to_string(),
        });
    }
    if bottleneck_width == 0 {
        return Err(Error::Config("bottleneck width must be positive".into()));
    }
    if model.adapter_width.is_some() {
        return Err(Error::Invalid("model already has adapters".into()));
    }
    let mut out = model.clone();
    network::init_adapters(&model.config, bottleneck_width, &mut out.params);
    out.adapter_width = Some(bottleneck_width);
    out.trainable = BTreeSet::from([ParamGroup::Adapter]);
    Ok(out)
}

impl DualEncoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable weights, for optimizers and finite-difference probes.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn has_temporal_mixing(&self) -> bool {
        self.temporal
    }

    pub fn adapter_width(&self) -> Option<usize> {
        self.adapter_width
    }

    pub fn trainable_groups(&self) -> &BTreeSet<ParamGroup> {
        &self.trainable
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        ParamGroup::of(name).is_some_and(|g| self.trainable.contains(&g))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.element_count()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| self.is_trainable(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn with_tokenizer(mut self, tokenizer: Tokenizer) -> Result<Self> {
        if tokenizer.vocab_size() > self.config.text_vocab_size {
            return Err(Error::Config(format!(
                "tokenizer has {} words but text_vocab_size is {}",
                tokenizer.vocab_size(),
                self.config.text_vocab_size
            )));
        }
        self.tokenizer = tokenizer;
        Ok(self)
    }

    /// A trainable copy of a teacher. The cross-frame mixing layer is added
    /// when `config.temporal_mixing` is set.
    pub fn student_from(teacher: &DualEncoder) -> Result<DualEncoder> {
        let mut s = teacher.clone();
        s.role = Role::Student;
        s.trainable = BTreeSet::from([ParamGroup::Visual, ParamGroup::Text]);
        if s.config.temporal_mixing && !s.temporal {
            network::init_temporal(&s.config, s.config.temporal_init, &mut s.params);
            s.temporal = true;
        }
        if s.temporal {
            s.trainable.insert(ParamGroup::Temporal);
        }
        if s.adapter_width.is_some() {
            s.trainable = BTreeSet::from([ParamGroup::Adapter]);
        }
        Ok(s)
    }

    /// Freezes every parameter and marks the model as a teacher.
    pub fn into_teacher(mut self) -> DualEncoder {
        self.role = Role::Teacher;
        self.trainable.clear();
        self
    }

    /// Marks every parameter group present in the model as trainable (student role).
    pub fn into_trainable_student(mut self) -> DualEncoder {
        self.role = Role::Student;
        self.trainable = self.params.names().filter_map(|n| ParamGroup::of(n)).collect();
        self
    }

    fn net(&self) -> Net<'_> {
        Net {
            cfg: &self.config,
            temporal: self.temporal,
            adapters: self.adapter_width.is_some(),
        }
    }

    pub(crate) fn check_video(&self, video: &VideoTensor) -> Result<()> {
        let (h, w) = (video.height(), video.width());
        let p = self.config.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!(
                "frame size {h}x{w} is not divisible by patch size {p}"
            )));
        }
        if h != self.config.image_size || w != self.config.image_size {
            return Err(Error::Shape(format!(
                "frame size {h}x{w} does not match encoder image size {}",
                self.config.image_size
            )));
        }
        Ok(())
    }

    /// Appends the end-of-text id, truncating over-length input.
    pub fn prepare_tokens(&self, tokens: &[usize]) -> Result<Warned<Vec<usize>>> {
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.text_vocab_size) {
            return Err(Error::UnknownToken {
                id,
                vocab_size: self.config.text_vocab_size,
            });
        }
        let max = self.config.max_text_len - 1;
        let mut warnings = Vec::new();
        let mut ids: Vec<usize> = tokens.to_vec();
        if ids.len() > max {
            warnings.push(Warning::TextTruncated {
                original: ids.len(),
                max,
            });
            ids.truncate(max);
        }
        ids.push(tokenizer::EOT_ID);
        Ok(Warned::with(ids, warnings))
    }

    pub fn tokenize(&self, text: &str) -> Result<Warned<Vec<usize>>> {
        self.prepare_tokens(&self.tokenizer.encode(text))
    }

    /// Per-frame global-token embeddings (after cross-frame mixing, if present).
    pub fn encode_video_frames(&self, video: &VideoTensor) -> Result<FrameFeatures> {
        self.check_video(video)?;
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, &self.trainable);
        let out = self.net().visual(&mut tape, &mut b, &[video]);
        Ok(FrameFeatures {
            features: tape.value(out.frames).clone(),
        })
    }

    /// Mean-pooled video embeddings, one row per video, computed in chunks.
    pub fn encode_videos(&self, videos: &[VideoTensor]) -> Result<Array2<f64>> {
        for v in videos {
            self.check_video(v)?;
        }
        let mut rows = Vec::with_capacity(videos.len());
        for chunk in videos.chunks(INFERENCE_CHUNK) {
            let refs: Vec<&VideoTensor> = chunk.iter().collect();
            let mut tape = Tape::new();
            let mut b = Binder::new(&self.params, &self.trainable);
            let out = self.net().visual(&mut tape, &mut b, &refs);
            let segs = video_segments(&refs);
            let pooled = tape.segment_mean(out.frames, segs);
            rows.push(tape.value(pooled).clone());
        }
        if rows.is_empty() {
            return Ok(Array2::zeros((0, self.config.embed_dim)));
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
    }

    /// Text embedding of one token sequence (without end-of-text; it is appended here).
    pub fn encode_text(&self, tokens: &[usize]) -> Result<Warned<EmbeddingVector>> {
        let prepared = self.prepare_tokens(tokens)?;
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, &self.trainable);
        let out = self.net().text(&mut tape, &mut b, std::slice::from_ref(&prepared.value));
        let emb = EmbeddingVector::new(tape.value(out).row(0).to_owned())?;
        Ok(Warned {
            value: emb,
            warnings: prepared.warnings,
        })
    }

    /// Embeds prompt strings, one row per prompt.
    pub fn encode_prompts(&self, prompts: &[String]) -> Result<Array2<f64>> {
        let seqs = prompts
            .iter()
            .map(|p| self.tokenize(p).map(|w| w.value))
            .collect::<Result<Vec<_>>>()?;
        self.encode_token_batch(&seqs)
    }

    /// Embeds prepared sequences (already terminated by end-of-text).
    pub(crate) fn encode_token_batch(&self, seqs: &[Vec<usize>]) -> Result<Array2<f64>> {
        if seqs.is_empty() {
            return Ok(Array2::zeros((0, self.config.embed_dim)));
        }
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, &self.trainable);
        let out = self.net().text(&mut tape, &mut b, seqs);
        Ok(tape.value(out).clone())
    }

    /// Last-layer, head-averaged attention from the global token to each patch,
    /// `T × P`. Each row sums to one minus the global token's self-attention.
    pub fn get_cls_attention(&self, video: &VideoTensor) -> Result<Array2<f64>> {
        if !self.config.record_attention {
            return Err(Error::Invalid(
                "model was built without attention recording".into(),
            ));
        }
        self.check_video(video)?;
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, &self.trainable);
        let out = self.net().visual(&mut tape, &mut b, &[video]);
        Ok(network::cls_attention(
            &tape,
            out.last_attention,
            video.num_frames(),
            self.config.heads,
            out.tokens_per_frame,
        ))
    }

    pub(crate) fn net_for_training(&self) -> Net<'_> {
        self.net()
    }

    pub(crate) fn binder(&self) -> Binder<'_> {
        Binder::new(&self.params, &self.trainable)
    }

    /// Digest of architecture, tokenizer and weights.
    pub fn digest(&self) -> String {
        let ck = self.to_checkpoint("", serde_json::Value::Null);
        digest::of_bytes(&ck.to_bytes().expect("serializable"))
    }

    pub fn to_checkpoint(&self, config_digest: &str, extra: serde_json::Value) -> Checkpoint {
        let spec = ModelSpec {
            config: self.config.clone(),
            role: self.role,
            temporal: self.temporal,
            adapter_width: self.adapter_width,
            trainable: self.trainable.clone(),
            tokenizer: self.tokenizer.words().to_vec(),
        };
        let extra = serde_json::json!({ "model": spec, "meta": extra });
        Checkpoint {
            manifest: CheckpointManifest {
                format_version: checkpoint::FORMAT_VERSION,
                config_digest: config_digest.to_string(),
                role: self.role.to_string(),
                extra,
            },
            tensors: self.params.tensors.clone(),
        }
    }

    /// Rebuilds a model from a checkpoint, ignoring non-model tensors (heads, optimizer state).
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<DualEncoder> {
        let spec: ModelSpec = serde_json::from_value(
            ck.manifest
                .extra
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("manifest has no model section".into()))?,
        )?;
        spec.config.validate()?;
        let mut expected = network::init_backbone(&spec.config);
        if spec.temporal {
            network::init_temporal(&spec.config, TemporalInit::Zero, &mut expected);
        }
        if let Some(w) = spec.adapter_width {
            network::init_adapters(&spec.config, w, &mut expected);
        }
        let mut params = ParamStore::default();
        for (name, template) in expected.iter() {
            let t = ck
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dim() != template.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.dim(),
                    template.dim()
                )));
            }
            params.insert(name.clone(), t.clone());
        }
        let mut tokenizer = Tokenizer::from_words(spec.tokenizer);
        tokenizer.rebuild_index();
        Ok(DualEncoder {
            config: spec.config,
            role: spec.role,
            params,
            trainable: spec.trainable,
            temporal: spec.temporal,
            adapter_width: spec.adapter_width,
            tokenizer,
        })
    }

    /// Copies externally trained weights in by name. `mapping` sends each of this
    /// model's parameter names to the external name; every model tensor must be
    /// covered and shape-compatible.
    pub fn import_weights(
        &mut self,
        external: &BTreeMap<String, Array2<f64>>,
        mapping: &BTreeMap<String, String>,
    ) -> Result<()> {
        let mut staged = Vec::new();
        for (name, current) in self.params.iter() {
            let ext_name = mapping
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("no mapping for tensor {name}")))?;
            let t = external.get(ext_name).ok_or_else(|| {
                Error::Checkpoint(format!("external weights lack tensor {ext_name}"))
            })?;
            if t.dim() != current.dim() {
                return Err(Error::Checkpoint(format!(
                    "external tensor {ext_name} has shape {:?}, expected {:?}",
                    t.dim(),
                    current.dim()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(ext_name.clone()));
            }
            staged.push((name.clone(), t.clone()));
        }
        for (name, t) in staged {
            self.params.insert(name, t);
        }
        Ok(())
    }
}

pub(crate) fn video_segments(videos: &[&VideoTensor]) -> Vec<(usize, usize)> {
    let mut segs = Vec::with_capacity(videos.len());
    let mut start = 0;
    for v in videos {
        segs.push((start, v.num_frames()));
        start += v.num_frames();
    }
    segs
}
