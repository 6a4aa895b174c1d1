//! Cosine-similarity logits, cross-entropy and the combined training objective.

use ndarray::{Array2, ArrayView2, Axis};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

/// Fixed logit scale applied to cosine similarities.
pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    /// `N × K`, one row per video.
    pub values: Array2<f64>,
    pub logit_scale: f64,
}

impl LogitMatrix {
    pub fn new(values: Array2<f64>, logit_scale: f64) -> Result<Self> {
        if !(logit_scale > 0.0 && logit_scale.is_finite()) {
            return Err(Error::Invalid(format!("logit scale must be positive, got {logit_scale}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(Self { values, logit_scale })
    }

    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    labels: Vec<usize>,
}

impl LabelBatch {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn normalized_rows(m: ArrayView2<f64>, what: &str) -> Result<Array2<f64>> {
    let mut out = m.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !n.is_finite() {
            return Err(Error::NonFinite(format!("{what} embedding {i}")));
        }
        if n == 0.0 {
            return Err(Error::Invalid(format!("{what} embedding {i} has zero norm")));
        }
        row.mapv_inplace(|v| v / n);
    }
    Ok(out)
}

/// `s · cos(video_i, text_j)` for every pair.
pub fn similarity_logits(video: ArrayView2<f64>, text: ArrayView2<f64>, logit_scale: f64) -> Result<LogitMatrix> {
    if video.ncols() != text.ncols() {
        return Err(Error::Shape(format!(
            "video width {} does not match text width {}",
            video.ncols(),
            text.ncols()
        )));
    }
    let v = normalized_rows(video, "video")?;
    let t = normalized_rows(text, "text")?;
    LogitMatrix::new(v.dot(&t.t()) * logit_scale, logit_scale)
}

/// Mean over rows of `−log softmax(row)[label]`.
pub fn cross_entropy(logits: &LogitMatrix, labels: &LabelBatch) -> Result<f64> {
    if logits.values.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logits rows but {} labels",
            logits.values.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if let Some(&bad) = labels.labels().iter().find(|&&l| l >= logits.num_classes()) {
        return Err(Error::Invalid(format!("label {bad} out of range")));
    }
    if logits.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut total = 0.0;
    for (row, &label) in logits.values.outer_iter().zip(labels.labels()) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok(total / labels.len() as f64)
}

/// `ce + β·fd`.
pub fn total_loss(ce: f64, fd: f64, beta: f64) -> Result<f64> {
    if !(ce.is_finite() && fd.is_finite() && beta.is_finite()) {
        return Err(Error::NonFinite("loss terms".into()));
    }
    if ce < 0.0 || fd < 0.0 || beta < 0.0 {
        return Err(Error::Invalid("loss terms and beta must be nonnegative".into()));
    }
    Ok(ce + beta * fd)
}

/// Graph version of [`similarity_logits`].
pub(crate) fn logits_graph(tape: &mut Tape, video: Var, text: Var, logit_scale: f64) -> Var {
    let v = tape.row_normalize(video);
    let t = tape.row_normalize(text);
    let cos = tape.matmul_t(v, t);
    tape.scale(cos, logit_scale)
}
