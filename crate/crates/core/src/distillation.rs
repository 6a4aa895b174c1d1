//! Feature distillation heads and losses.
//!
//! Three topologies are supported: `Direct` compares student features with the
//! teacher's as they are, `Projector` passes them through a two-layer GELU MLP
//! first, and `Residual` uses `z + α·W2(GELU(W1 z))` with `W2` starting at zero
//! so the transformed feature initially equals the student feature.
//!
//! Features are rows; a weight matrix `W` acts as `z ↦ z·W`.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::autograd::{Tape, Var};
use crate::encoders::EmbeddingVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillVariant {
    Direct,
    Projector,
    Residual,
}

/// How per-sample distances are combined over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

fn init_uniform(width: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = 1.0 / (width as f64).sqrt();
    Array2::from_shape_fn((width, width), |_| rng.gen_range(-bound..bound))
}

fn check_square(w1: &Array2<f64>, w2: &Array2<f64>) -> Result<()> {
    let c = w1.nrows();
    if w1.dim() != (c, c) || w2.dim() != (c, c) || c == 0 {
        return Err(Error::Shape(format!(
            "head weights must be square and equal, got {:?} and {:?}",
            w1.dim(),
            w2.dim()
        )));
    }
    if w1.iter().chain(w2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("head weights".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualHead {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub alpha: f64,
}

impl ResidualHead {
    /// `W1` uniform in `±1/√C`, `W2` all zeros.
    pub fn new(width: usize, alpha: f64, seed: u64) -> Result<Self> {
        if width == 0 {
            return Err(Error::Shape("head width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_weights(init_uniform(width, &mut rng), Array2::zeros((width, width)), alpha)
    }

    pub fn from_weights(w1: Array2<f64>, w2: Array2<f64>, alpha: f64) -> Result<Self> {
        check_square(&w1, &w2)?;
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        Ok(Self { w1, w2, alpha })
    }

    pub fn width(&self) -> usize {
        self.w1.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorHead {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

impl ProjectorHead {
    pub fn new(width: usize, seed: u64) -> Result<Self> {
        if width == 0 {
            return Err(Error::Shape("head width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = init_uniform(width, &mut rng);
        let w2 = init_uniform(width, &mut rng);
        Self::from_weights(w1, w2)
    }

    pub fn from_weights(w1: Array2<f64>, w2: Array2<f64>) -> Result<Self> {
        check_square(&w1, &w2)?;
        Ok(Self { w1, w2 })
    }

    pub fn width(&self) -> usize {
        self.w1.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DistillHead {
    Residual(ResidualHead),
    Projector(ProjectorHead),
}

impl DistillHead {
    pub fn new(variant: DistillVariant, width: usize, alpha: f64, seed: u64) -> Result<Option<Self>> {
        Ok(match variant {
            DistillVariant::Direct => None,
            DistillVariant::Projector => Some(Self::Projector(ProjectorHead::new(width, seed)?)),
            DistillVariant::Residual => Some(Self::Residual(ResidualHead::new(width, alpha, seed)?)),
        })
    }

    pub fn weights(&self) -> (&Array2<f64>, &Array2<f64>) {
        match self {
            Self::Residual(h) => (&h.w1, &h.w2),
            Self::Projector(h) => (&h.w1, &h.w2),
        }
    }

    pub fn weights_mut(&mut self) -> (&mut Array2<f64>, &mut Array2<f64>) {
        match self {
            Self::Residual(h) => (&mut h.w1, &mut h.w2),
            Self::Projector(h) => (&mut h.w1, &mut h.w2),
        }
    }

    fn width(&self) -> usize {
        self.weights().0.nrows()
    }
}

fn check_variant(variant: DistillVariant, head: Option<&DistillHead>) -> Result<()> {
    let ok = matches!(
        (variant, head),
        (DistillVariant::Direct, None)
            | (DistillVariant::Projector, Some(DistillHead::Projector(_)))
            | (DistillVariant::Residual, Some(DistillHead::Residual(_)))
    );
    if ok {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "head {:?} does not fit the {variant:?} variant",
            head.map(|h| match h {
                DistillHead::Residual(_) => "residual",
                DistillHead::Projector(_) => "projector",
            })
        )))
    }
}

/// Tape handles of a head's weights.
#[derive(Debug, Clone, Copy)]
pub(crate) struct HeadVars {
    pub w1: Var,
    pub w2: Var,
    /// `None` for the projector (no identity path).
    pub alpha: Option<f64>,
}

impl HeadVars {
    pub fn bind(tape: &mut Tape, head: &DistillHead, trainable: bool) -> Self {
        let (w1, w2) = head.weights();
        let alpha = match head {
            DistillHead::Residual(h) => Some(h.alpha),
            DistillHead::Projector(_) => None,
        };
        Self {
            w1: tape.leaf(w1.clone(), trainable),
            w2: tape.leaf(w2.clone(), trainable),
            alpha,
        }
    }
}

/// Candidate features compared with the teacher: `z`, `W2·GELU(W1 z)` or `z + α·W2·GELU(W1 z)`.
pub(crate) fn apply_head(tape: &mut Tape, head: Option<HeadVars>, z: Var) -> Var {
    let Some(h) = head else { return z };
    let hidden = tape.matmul(z, h.w1);
    let hidden = tape.gelu(hidden);
    let projected = tape.matmul(hidden, h.w2);
    match h.alpha {
        None => projected,
        Some(alpha) => {
            let scaled = tape.scale(projected, alpha);
            tape.add(z, scaled)
        }
    }
}

/// Per-row L2 distances, reduced over the batch.
pub(crate) fn fd_graph(tape: &mut Tape, teacher: Var, candidate: Var, reduction: Reduction) -> Var {
    let diff = tape.sub(teacher, candidate);
    let norms = tape.row_norm(diff);
    match reduction {
        Reduction::Mean => tape.mean(norms),
        Reduction::Sum => tape.sum(norms),
    }
}

fn single_transform(head: &DistillHead, z: &EmbeddingVector) -> Result<EmbeddingVector> {
    if z.len() != head.width() {
        return Err(Error::Shape(format!(
            "feature width {} does not match head width {}",
            z.len(),
            head.width()
        )));
    }
    let mut tape = Tape::new();
    let vars = HeadVars::bind(&mut tape, head, false);
    let zv = tape.constant(z.values.clone().insert_axis(ndarray::Axis(0)));
    let out = apply_head(&mut tape, Some(vars), zv);
    EmbeddingVector::new(tape.value(out).row(0).to_owned())
}

/// `z + α·W2(GELU(W1 z))`.
pub fn residual_transform(head: &ResidualHead, z: &EmbeddingVector) -> Result<EmbeddingVector> {
    single_transform(&DistillHead::Residual(head.clone()), z)
}

/// `W2(GELU(W1 z))`.
pub fn projector_transform(head: &ProjectorHead, z: &EmbeddingVector) -> Result<EmbeddingVector> {
    single_transform(&DistillHead::Projector(head.clone()), z)
}

/// L2 distance between a teacher feature and a candidate feature.
pub fn fd_loss(teacher: &EmbeddingVector, candidate: &EmbeddingVector) -> Result<f64> {
    if teacher.len() != candidate.len() {
        return Err(Error::Shape(format!(
            "feature widths differ: {} vs {}",
            teacher.len(),
            candidate.len()
        )));
    }
    if teacher.values.iter().chain(candidate.values.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("distillation features".into()));
    }
    Ok((&teacher.values - &candidate.values)
        .iter()
        .map(|d| d * d)
        .sum::<f64>()
        .sqrt())
}

fn check_batches(teacher: ArrayView2<f64>, student: ArrayView2<f64>, head: Option<&DistillHead>) -> Result<()> {
    if teacher.dim() != student.dim() {
        return Err(Error::Shape(format!(
            "teacher batch {:?} and student batch {:?} are not aligned",
            teacher.dim(),
            student.dim()
        )));
    }
    if teacher.nrows() == 0 {
        return Err(Error::Invalid("empty distillation batch".into()));
    }
    if let Some(h) = head {
        if h.width() != student.ncols() {
            return Err(Error::Shape("head width does not match features".into()));
        }
    }
    if teacher.iter().chain(student.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("distillation features".into()));
    }
    Ok(())
}

/// Gradients of one branch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchGradients {
    pub loss: f64,
    pub student: Array2<f64>,
    /// `(dW1, dW2)` when a head is present.
    pub head: Option<(Array2<f64>, Array2<f64>)>,
}

/// Batch distillation loss of one branch (vision or text). Rows of `teacher`
/// and `student` are aligned samples.
pub fn branch_fd_loss(
    variant: DistillVariant,
    head: Option<&DistillHead>,
    teacher: ArrayView2<f64>,
    student: ArrayView2<f64>,
    reduction: Reduction,
) -> Result<f64> {
    Ok(branch_fd_backward(variant, head, teacher, student, reduction)?.loss)
}

/// As [`branch_fd_loss`], also returning gradients with respect to the student
/// features and head weights. The teacher side is a constant.
pub fn branch_fd_backward(
    variant: DistillVariant,
    head: Option<&DistillHead>,
    teacher: ArrayView2<f64>,
    student: ArrayView2<f64>,
    reduction: Reduction,
) -> Result<BranchGradients> {
    check_variant(variant, head)?;
    check_batches(teacher, student, head)?;
    let mut tape = Tape::new();
    let t = tape.constant(teacher.to_owned());
    let s = tape.leaf(student.to_owned(), true);
    let hv = head.map(|h| HeadVars::bind(&mut tape, h, true));
    let cand = apply_head(&mut tape, hv, s);
    let loss = fd_graph(&mut tape, t, cand, reduction);
    let mut grads = tape.backward(loss);
    let student_grad = grads.take(s).expect("student gradient");
    let head = hv.map(|h| {
        (
            grads.take(h.w1).expect("w1 gradient"),
            grads.take(h.w2).expect("w2 gradient"),
        )
    });
    Ok(BranchGradients {
        loss: tape.scalar(loss),
        student: student_grad,
        head,
    })
}

/// Vision plus text distillation loss.
pub fn total_fd_loss(vision: f64, text: f64) -> Result<f64> {
    if !vision.is_finite() || !text.is_finite() {
        return Err(Error::NonFinite("distillation losses".into()));
    }
    if vision < 0.0 || text < 0.0 {
        return Err(Error::Invalid("distillation losses must be nonnegative".into()));
    }
    Ok(vision + text)
}

/// Independent heads for the vision and text branches.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillHeads {
    pub variant: DistillVariant,
    pub vision: Option<DistillHead>,
    pub text: Option<DistillHead>,
}

impl DistillHeads {
    pub fn new(variant: DistillVariant, width: usize, alpha: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            variant,
            vision: DistillHead::new(variant, width, alpha, seed ^ 0x0001)?,
            text: DistillHead::new(variant, width, alpha, seed ^ 0x0002)?,
        })
    }

    /// Tensors under the reserved checkpoint names `head.{vision,text}.{W1,W2}`.
    pub fn to_tensors(&self) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        for (branch, head) in [("vision", &self.vision), ("text", &self.text)] {
            if let Some(h) = head {
                let (w1, w2) = h.weights();
                out.insert(format!("head.{branch}.W1"), w1.clone());
                out.insert(format!("head.{branch}.W2"), w2.clone());
            }
        }
        out
    }

    pub fn from_tensors(
        variant: DistillVariant,
        alpha: f64,
        tensors: &BTreeMap<String, Array2<f64>>,
    ) -> Result<Self> {
        let load = |branch: &str| -> Result<Option<DistillHead>> {
            if variant == DistillVariant::Direct {
                return Ok(None);
            }
            let get = |k: &str| {
                tensors
                    .get(&format!("head.{branch}.{k}"))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing head.{branch}.{k}")))
            };
            let (w1, w2) = (get("W1")?, get("W2")?);
            Ok(Some(match variant {
                DistillVariant::Residual => DistillHead::Residual(ResidualHead::from_weights(w1, w2, alpha)?),
                _ => DistillHead::Projector(ProjectorHead::from_weights(w1, w2)?),
            }))
        };
        Ok(Self {
            variant,
            vision: load("vision")?,
            text: load("text")?,
        })
    }
}

/// Unit-normalizes a feature vector if requested; used when distilling in the normalized space.
pub fn maybe_normalize(values: Array1<f64>, normalized: bool) -> Array1<f64> {
    if !normalized {
        return values;
    }
    let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        values / n
    } else {
        values
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn ev(v: Array1<f64>) -> EmbeddingVector {
        EmbeddingVector::new(v).unwrap()
    }

    /// Φ(1) from the error function, computed independently of the tape.
    fn gelu_one() -> f64 {
        0.5 * (1.0 + libm::erf(1.0 / 2f64.sqrt()))
    }

    #[test]
    fn fresh_residual_head_is_identity() {
        let head = ResidualHead::new(8, 0.1, 3).unwrap();
        assert!(head.w2.iter().all(|&v| v == 0.0));
        let z = ev(Array1::from_iter((0..8).map(|i| i as f64 * 0.37 - 1.0)));
        assert_eq!(residual_transform(&head, &z).unwrap().values, z.values);
    }

    #[test]
    fn zero_alpha_is_identity() {
        let mut head = ResidualHead::new(4, 0.0, 3).unwrap();
        head.w2 = Array2::from_elem((4, 4), 0.7);
        let z = ev(array![0.3, -1.2, 2.0, 0.1]);
        assert_eq!(residual_transform(&head, &z).unwrap().values, z.values);
    }

    #[test]
    fn residual_identity_weights_oracle() {
        let eye = Array2::eye(2);
        let head = ResidualHead::from_weights(eye.clone(), eye, 1.0).unwrap();
        let out = residual_transform(&head, &ev(array![1.0, 0.0])).unwrap();
        assert!((out.values[0] - (1.0 + gelu_one())).abs() < 1e-12);
        assert!((out.values[0] - 1.8413).abs() < 1e-4);
        assert_eq!(out.values[1], 0.0);
    }

    #[test]
    fn projector_oracles() {
        let eye = Array2::eye(2);
        let head = ProjectorHead::from_weights(eye.clone(), eye).unwrap();
        let out = projector_transform(&head, &ev(array![1.0, 0.0])).unwrap();
        assert!((out.values[0] - gelu_one()).abs() < 1e-12);
        assert_eq!(out.values[1], 0.0);

        let zeroed = ProjectorHead::from_weights(Array2::from_elem((2, 2), 0.4), Array2::zeros((2, 2))).unwrap();
        let out = projector_transform(&zeroed, &ev(array![3.0, -1.0])).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));

        let random = ProjectorHead::new(2, 9).unwrap();
        let out = projector_transform(&random, &ev(array![0.0, 0.0])).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_rejected() {
        let head = ResidualHead::new(3, 0.1, 0).unwrap();
        assert!(matches!(residual_transform(&head, &ev(array![1.0, 2.0])), Err(Error::Shape(_))));
        assert!(fd_loss(&ev(array![1.0]), &ev(array![1.0, 2.0])).is_err());
    }

    #[test]
    fn fd_loss_values() {
        assert_eq!(fd_loss(&ev(array![0.2, 0.5]), &ev(array![0.2, 0.5])).unwrap(), 0.0);
        let d = fd_loss(&ev(array![1.0, 0.0]), &ev(array![0.0, 1.0])).unwrap();
        assert!((d - 2f64.sqrt()).abs() < 1e-12);
        assert!((d - 1.41421).abs() < 1e-5);
    }

    #[test]
    fn branch_variant_head_mismatch() {
        let t = Array2::zeros((2, 3));
        let head = DistillHead::Residual(ResidualHead::new(3, 0.1, 0).unwrap());
        let r = branch_fd_loss(DistillVariant::Direct, Some(&head), t.view(), t.view(), Reduction::Mean);
        assert!(r.is_err());
        let r = branch_fd_loss(DistillVariant::Projector, Some(&head), t.view(), t.view(), Reduction::Mean);
        assert!(r.is_err());
        let r = branch_fd_loss(DistillVariant::Residual, None, t.view(), t.view(), Reduction::Mean);
        assert!(r.is_err());
    }

    #[test]
    fn projector_with_zero_w2_loss_is_mean_teacher_norm() {
        let teacher = array![[3.0, 4.0], [1.0, 0.0], [0.0, 2.0]];
        let student = array![[0.5, 0.1], [-0.3, 0.9], [2.0, 2.0]];
        let head = DistillHead::Projector(
            ProjectorHead::from_weights(Array2::eye(2), Array2::zeros((2, 2))).unwrap(),
        );
        let l = branch_fd_loss(DistillVariant::Projector, Some(&head), teacher.view(), student.view(), Reduction::Mean)
            .unwrap();
        assert!((l - (5.0 + 1.0 + 2.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn residual_fresh_head_on_identical_features_is_zero() {
        let feats = array![[0.3, -0.2, 1.0], [2.0, 0.0, -1.0]];
        let head = DistillHead::Residual(ResidualHead::new(3, 0.1, 1).unwrap());
        let g = branch_fd_backward(DistillVariant::Residual, Some(&head), feats.view(), feats.view(), Reduction::Mean)
            .unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.student.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn total_fd_loss_sums() {
        assert_eq!(total_fd_loss(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(total_fd_loss(1.5, 2.5).unwrap(), 4.0);
        assert!(total_fd_loss(1.0, 2.0).unwrap() < total_fd_loss(1.0, 2.1).unwrap());
        assert!(total_fd_loss(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn heads_serialize_under_reserved_names() {
        let heads = DistillHeads::new(DistillVariant::Residual, 4, 0.1, 5).unwrap();
        let t = heads.to_tensors();
        assert_eq!(
            t.keys().cloned().collect::<Vec<_>>(),
            vec!["head.text.W1", "head.text.W2", "head.vision.W1", "head.vision.W2"]
        );
        assert_eq!(DistillHeads::from_tensors(DistillVariant::Residual, 0.1, &t).unwrap(), heads);
        assert_ne!(heads.vision, heads.text);
    }

    proptest! {
        #[test]
        fn fd_loss_symmetric_and_nonnegative(
            a in proptest::collection::vec(-10.0f64..10.0, 6),
            b in proptest::collection::vec(-10.0f64..10.0, 6),
        ) {
            let (a, b) = (ev(Array1::from(a)), ev(Array1::from(b)));
            let ab = fd_loss(&a, &b).unwrap();
            prop_assert_eq!(ab, fd_loss(&b, &a).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab == 0.0, a.values == b.values);
        }

        #[test]
        fn zero_alpha_matches_direct_bitwise(
            seed in 0u64..1000,
            t in proptest::collection::vec(-3.0f64..3.0, 12),
            s in proptest::collection::vec(-3.0f64..3.0, 12),
        ) {
            let teacher = Array2::from_shape_vec((3, 4), t).unwrap();
            let student = Array2::from_shape_vec((3, 4), s).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let head = ResidualHead::from_weights(init_uniform(4, &mut rng), init_uniform(4, &mut rng), 0.0).unwrap();
            let r = branch_fd_backward(DistillVariant::Residual, Some(&DistillHead::Residual(head)), teacher.view(), student.view(), Reduction::Mean).unwrap();
            let d = branch_fd_backward(DistillVariant::Direct, None, teacher.view(), student.view(), Reduction::Mean).unwrap();
            prop_assert_eq!(r.loss.to_bits(), d.loss.to_bits());
            prop_assert_eq!(r.student, d.student);
        }
    }
}
