//! Parameter layout, initialization and graph construction for the toy
//! transformer dual encoder.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

use super::{EncoderConfig, ParamGroup, ParamStore, TemporalInit, VideoTensor};
use crate::autograd::{Tape, Var};

const POS_INIT: f64 = 2e-4;
const TOKEN_INIT: f64 = 1.0;
const TEXT_POS_INIT: f64 = 0.1;
const CLS_INIT: f64 = 0.05;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

fn linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{name}.w"), uniform(rng, fan_in, fan_out, bound));
    store.insert(format!("{name}.b"), Array2::zeros((1, fan_out)));
}

fn layer_norm(store: &mut ParamStore, name: &str, width: usize) {
    store.insert(format!("{name}.g"), Array2::ones((1, width)));
    store.insert(format!("{name}.b"), Array2::zeros((1, width)));
}

fn block(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, c: usize, hidden: usize) {
    layer_norm(store, &format!("{prefix}.ln1"), c);
    linear(store, rng, &format!("{prefix}.attn.qkv"), c, 3 * c);
    linear(store, rng, &format!("{prefix}.attn.out"), c, c);
    layer_norm(store, &format!("{prefix}.ln2"), c);
    linear(store, rng, &format!("{prefix}.mlp.fc"), c, hidden);
    linear(store, rng, &format!("{prefix}.mlp.proj"), hidden, c);
}

/// Backbone parameters shared by teacher and student builds of one seed.
pub(crate) fn init_backbone(cfg: &EncoderConfig) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::default();
    let c = cfg.embed_dim;
    let hidden = c * cfg.mlp_ratio;
    let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
    let tokens = cfg.patches_per_frame() + 1;

    store.insert(
        "visual.patch_embed".into(),
        uniform(&mut rng, patch_dim, c, 1.0 / (patch_dim as f64).sqrt()),
    );
    store.insert("visual.cls".into(), uniform(&mut rng, 1, c, CLS_INIT));
    store.insert("visual.pos".into(), uniform(&mut rng, tokens, c, POS_INIT));
    layer_norm(&mut store, "visual.ln_pre", c);
    for i in 0..cfg.depth {
        block(&mut store, &mut rng, &format!("visual.blocks.{i}"), c, hidden);
    }
    layer_norm(&mut store, "visual.ln_post", c);
    store.insert("visual.proj".into(), uniform(&mut rng, c, c, 1.0 / (c as f64).sqrt()));

    store.insert(
        "text.token_embed".into(),
        uniform(&mut rng, cfg.text_vocab_size, c, TOKEN_INIT),
    );
    store.insert(
        "text.pos".into(),
        uniform(&mut rng, cfg.max_text_len, c, TEXT_POS_INIT),
    );
    for i in 0..cfg.depth {
        block(&mut store, &mut rng, &format!("text.blocks.{i}"), c, hidden);
    }
    layer_norm(&mut store, "text.ln_final", c);
    store.insert("text.proj".into(), uniform(&mut rng, c, c, 1.0 / (c as f64).sqrt()));
    store
}

/// Cross-frame attention layer used only by students.
pub(crate) fn init_temporal(cfg: &EncoderConfig, init: TemporalInit, store: &mut ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e3a_11c5_0000_0001);
    let c = cfg.embed_dim;
    layer_norm(store, "temporal.ln", c);
    linear(store, &mut rng, "temporal.qkv", c, 3 * c);
    linear(store, &mut rng, "temporal.out", c, c);
    if init == TemporalInit::Zero {
        store.insert("temporal.out.w".into(), Array2::zeros((c, c)));
    }
}

/// Bottleneck adapters after every block of both towers; up-projections start at zero.
pub(crate) fn init_adapters(cfg: &EncoderConfig, width: usize, store: &mut ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5ad_a97e_0000_0002);
    let c = cfg.embed_dim;
    for tower in ["visual", "text"] {
        for i in 0..cfg.depth {
            let p = format!("adapter.{tower}.{i}");
            linear(store, &mut rng, &format!("{p}.down"), c, width);
            store.insert(format!("{p}.up.w"), Array2::zeros((width, c)));
            store.insert(format!("{p}.up.b"), Array2::zeros((1, c)));
        }
    }
}

/// Binds named parameters to tape leaves, once per graph.
pub(crate) struct Binder<'p> {
    params: &'p ParamStore,
    trainable: &'p BTreeSet<ParamGroup>,
    pub vars: BTreeMap<String, Var>,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p ParamStore, trainable: &'p BTreeSet<ParamGroup>) -> Self {
        Self {
            params,
            trainable,
            vars: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .clone();
        let grad = ParamGroup::of(name).is_some_and(|g| self.trainable.contains(&g));
        let v = tape.leaf(value, grad);
        self.vars.insert(name.to_string(), v);
        v
    }
}

pub(crate) struct Net<'a> {
    pub cfg: &'a EncoderConfig,
    pub temporal: bool,
    pub adapters: bool,
}

pub(crate) struct VisualOut {
    /// One row per frame, after optional temporal mixing.
    pub frames: Var,
    /// Attention node of the last visual block.
    pub last_attention: Var,
    pub tokens_per_frame: usize,
}

impl Net<'_> {
    fn linear(&self, tape: &mut Tape, b: &mut Binder, name: &str, x: Var) -> Var {
        let w = b.get(tape, &format!("{name}.w"));
        let bias = b.get(tape, &format!("{name}.b"));
        let y = tape.matmul(x, w);
        tape.add_row(y, bias)
    }

    fn ln(&self, tape: &mut Tape, b: &mut Binder, name: &str, x: Var) -> Var {
        let g = b.get(tape, &format!("{name}.g"));
        let beta = b.get(tape, &format!("{name}.b"));
        tape.layer_norm(x, g, beta)
    }

    /// Pre-norm transformer block; returns the new residual stream and its attention node.
    fn block(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        prefix: &str,
        adapter: Option<String>,
        x: Var,
        segments: &[(usize, usize)],
    ) -> (Var, Var) {
        let h = self.ln(tape, b, &format!("{prefix}.ln1"), x);
        let qkv = self.linear(tape, b, &format!("{prefix}.attn.qkv"), h);
        let att = tape.attention(qkv, segments.to_vec(), self.cfg.heads);
        let o = self.linear(tape, b, &format!("{prefix}.attn.out"), att);
        let x = tape.add(x, o);
        let h = self.ln(tape, b, &format!("{prefix}.ln2"), x);
        let m = self.linear(tape, b, &format!("{prefix}.mlp.fc"), h);
        let m = tape.gelu(m);
        let m = self.linear(tape, b, &format!("{prefix}.mlp.proj"), m);
        let mut x = tape.add(x, m);
        if let Some(a) = adapter {
            let d = self.linear(tape, b, &format!("{a}.down"), x);
            let d = tape.gelu(d);
            let u = self.linear(tape, b, &format!("{a}.up"), d);
            x = tape.add(x, u);
        }
        (x, att)
    }

    /// Flattens every frame of every video into `P × 3·p·p` patch rows.
    fn patchify(&self, videos: &[&VideoTensor]) -> Array2<f64> {
        let p = self.cfg.patch_size;
        let per = self.cfg.patches_per_frame();
        let grid = self.cfg.image_size / p;
        let frames: usize = videos.iter().map(|v| v.num_frames()).sum();
        let mut out = Array2::zeros((frames * per, 3 * p * p));
        let mut row = 0;
        for v in videos {
            let data = v.data();
            for t in 0..v.num_frames() {
                for gy in 0..grid {
                    for gx in 0..grid {
                        let mut col = 0;
                        for ch in 0..3 {
                            for py in 0..p {
                                for px in 0..p {
                                    out[[row, col]] = data[[t, ch, gy * p + py, gx * p + px]];
                                    col += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        out
    }

    pub fn visual(&self, tape: &mut Tape, b: &mut Binder, videos: &[&VideoTensor]) -> VisualOut {
        let per = self.cfg.patches_per_frame();
        let len = per + 1;
        let patches = tape.constant(self.patchify(videos));
        let frames = tape.value(patches).nrows() / per;

        let w = b.get(tape, "visual.patch_embed");
        let emb = tape.matmul(patches, w);
        let cls = b.get(tape, "visual.cls");
        let all = tape.concat_rows(vec![emb, cls]);
        let mut order = Vec::with_capacity(frames * len);
        for f in 0..frames {
            order.push(frames * per);
            order.extend(f * per..(f + 1) * per);
        }
        let x = tape.gather_rows(all, order);
        let pos = b.get(tape, "visual.pos");
        let pos = tape.gather_rows(pos, (0..frames).flat_map(|_| 0..len).collect());
        let x = tape.add(x, pos);
        let mut x = self.ln(tape, b, "visual.ln_pre", x);

        let segments: Vec<_> = (0..frames).map(|f| (f * len, len)).collect();
        let mut last = None;
        for i in 0..self.cfg.depth {
            let adapter = self.adapters.then(|| format!("adapter.visual.{i}"));
            let (nx, att) = self.block(tape, b, &format!("visual.blocks.{i}"), adapter, x, &segments);
            x = nx;
            last = Some(att);
        }
        let cls_rows = tape.gather_rows(x, (0..frames).map(|f| f * len).collect());
        let h = self.ln(tape, b, "visual.ln_post", cls_rows);
        let proj = b.get(tape, "visual.proj");
        let mut out = tape.matmul(h, proj);

        if self.temporal {
            let mut segs = Vec::with_capacity(videos.len());
            let mut start = 0;
            for v in videos {
                segs.push((start, v.num_frames()));
                start += v.num_frames();
            }
            let h = self.ln(tape, b, "temporal.ln", out);
            let qkv = self.linear(tape, b, "temporal.qkv", h);
            let att = tape.attention(qkv, segs, self.cfg.heads);
            let o = self.linear(tape, b, "temporal.out", att);
            out = tape.add(out, o);
        }
        VisualOut {
            frames: out,
            last_attention: last.expect("depth >= 1"),
            tokens_per_frame: len,
        }
    }

    /// Encodes token sequences that already end in the end-of-text id.
    pub fn text(&self, tape: &mut Tape, b: &mut Binder, seqs: &[Vec<usize>]) -> Var {
        let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
        let positions: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let table = b.get(tape, "text.token_embed");
        let tok = tape.gather_rows(table, ids);
        let pos = b.get(tape, "text.pos");
        let pos = tape.gather_rows(pos, positions);
        let mut x = tape.add(tok, pos);
        let mut segments = Vec::with_capacity(seqs.len());
        let mut start = 0;
        for s in seqs {
            segments.push((start, s.len()));
            start += s.len();
        }
        for i in 0..self.cfg.depth {
            let adapter = self.adapters.then(|| format!("adapter.text.{i}"));
            let (nx, _) = self.block(tape, b, &format!("text.blocks.{i}"), adapter, x, &segments);
            x = nx;
        }
        let eot = tape.gather_rows(x, segments.iter().map(|(s, l)| s + l - 1).collect());
        let h = self.ln(tape, b, "text.ln_final", eot);
        let proj = b.get(tape, "text.proj");
        tape.matmul(h, proj)
    }
}

/// Head-averaged attention of the global token (query row 0) over the patch tokens
/// of every frame, from a last-block attention node.
pub(crate) fn cls_attention(tape: &Tape, att: Var, frames: usize, heads: usize, len: usize) -> Array2<f64> {
    let probs = tape.attention_probs(att).expect("attention node");
    let mut out = Array2::zeros((frames, len - 1));
    for f in 0..frames {
        for h in 0..heads {
            let p = &probs[f * heads + h];
            let row = p.slice(s![0, 1..]);
            let mut target = out.row_mut(f);
            target += &(&row / heads as f64);
        }
    }
    out
}
