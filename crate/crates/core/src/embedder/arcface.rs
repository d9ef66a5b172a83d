//! Additive angular margin (ArcFace) softmax head.
//!
//! With unit embedding `x` and column-normalized class weights `ŵ_j`,
//! `cos θ_j = <x, ŵ_j>` is clamped to `[-1+ε, 1-ε]`; the target logit is
//! `s·cos(θ_y + m)` and the others `s·cos θ_j`. The loss is the batch mean of
//! softmax cross-entropy over these logits.

use ndarray::{Array2, ArrayView2};

use super::params::Tensor;
use super::{ArcFaceConfig, EmbedderError};

pub(crate) const COS_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct ArcFaceOutput {
    pub loss: f64,
    /// `B × C` logits with the margin applied to each row's target class.
    pub logits: Array2<f64>,
    /// `B × C` unclamped cosines (margin-free).
    pub cosines: Array2<f64>,
}

/// Column-normalized class weights shared by every row of a batch.
pub(crate) struct Head {
    d: usize,
    c: usize,
    /// `D × C`, columns unit norm.
    w_hat: Vec<f64>,
    norms: Vec<f64>,
    scale: f64,
    cos_m: f64,
    sin_m: f64,
}

pub(crate) struct RowOutput {
    pub loss: f64,
    pub correct: bool,
}

impl Head {
    pub fn new(w: &Tensor, cfg: &ArcFaceConfig) -> Result<Self, EmbedderError> {
        cfg.validate()?;
        let (d, c) = match w.shape.as_slice() {
            [d, c] => (*d, *c),
            s => return Err(EmbedderError::ShapeError(format!("class weights {s:?}"))),
        };
        let mut norms = vec![0.0; c];
        for row in w.data.chunks_exact(c).take(d) {
            for (n, v) in norms.iter_mut().zip(row) {
                *n += v * v;
            }
        }
        for n in &mut norms {
            *n = n.sqrt();
            if *n == 0.0 || !n.is_finite() {
                return Err(EmbedderError::ZeroVector);
            }
        }
        let mut w_hat = w.data.clone();
        for k in 0..d {
            for j in 0..c {
                w_hat[k * c + j] /= norms[j];
            }
        }
        Ok(Self {
            d,
            c,
            w_hat,
            norms,
            scale: cfg.scale,
            cos_m: cfg.margin.cos(),
            sin_m: cfg.margin.sin(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.c
    }

    fn cosines(&self, x: &[f64]) -> Vec<f64> {
        let mut cos = vec![0.0; self.c];
        for (k, xk) in x.iter().enumerate() {
            let row = &self.w_hat[k * self.c..(k + 1) * self.c];
            for (cj, wj) in cos.iter_mut().zip(row) {
                *cj += xk * wj;
            }
        }
        cos
    }

    /// Logits for one row plus `d logit_j / d cos_j`.
    fn logits(&self, cos: &[f64], label: usize) -> (Vec<f64>, Vec<f64>) {
        let mut logits = Vec::with_capacity(self.c);
        let mut dlogit = Vec::with_capacity(self.c);
        for (j, &raw) in cos.iter().enumerate() {
            let clamped = raw.clamp(-1.0 + COS_EPS, 1.0 - COS_EPS);
            let inside = if raw == clamped { 1.0 } else { 0.0 };
            if j == label {
                let sin = (1.0 - clamped * clamped).sqrt();
                logits.push(self.scale * (clamped * self.cos_m - sin * self.sin_m));
                dlogit.push(inside * self.scale * (self.cos_m + self.sin_m * clamped / sin));
            } else {
                logits.push(self.scale * clamped);
                dlogit.push(inside * self.scale);
            }
        }
        (logits, dlogit)
    }

    fn check_label(&self, label: usize) -> Result<(), EmbedderError> {
        if label >= self.c {
            return Err(EmbedderError::BadLabel {
                label,
                n_classes: self.c,
            });
        }
        Ok(())
    }

    /// Loss of one row; when `weight != 0` also accumulates `weight ×`
    /// gradients into `d_x` (length D) and `d_w` (`D × C`).
    pub fn row(
        &self,
        x: &[f64],
        label: usize,
        weight: f64,
        grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Result<(RowOutput, Vec<f64>, Vec<f64>), EmbedderError> {
        self.check_label(label)?;
        if x.len() != self.d {
            return Err(EmbedderError::ShapeError(format!(
                "embedding has {} dims, head expects {}",
                x.len(),
                self.d
            )));
        }
        let cos = self.cosines(x);
        let (logits, dlogit) = self.logits(&cos, label);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        let loss = lse - logits[label];
        let mut best = 0;
        for (j, c) in cos.iter().enumerate() {
            if *c > cos[best] {
                best = j;
            }
        }
        if let Some((d_x, d_w)) = grads {
            for j in 0..self.c {
                let p = (logits[j] - lse).exp();
                let g_logit = p - if j == label { 1.0 } else { 0.0 };
                let g_cos = weight * g_logit * dlogit[j];
                if g_cos == 0.0 {
                    continue;
                }
                let inv = 1.0 / self.norms[j];
                for k in 0..self.d {
                    let wh = self.w_hat[k * self.c + j];
                    d_x[k] += g_cos * wh;
                    d_w[k * self.c + j] += g_cos * (x[k] - cos[j] * wh) * inv;
                }
            }
        }
        Ok((RowOutput { loss, correct: best == label }, logits, cos))
    }
}

fn check_batch(emb: &ArrayView2<'_, f64>, labels: &[usize]) -> Result<(), EmbedderError> {
    if emb.nrows() != labels.len() || labels.is_empty() {
        return Err(EmbedderError::ShapeError(format!(
            "{} embeddings vs {} labels",
            emb.nrows(),
            labels.len()
        )));
    }
    Ok(())
}

fn tensor_from(w: ArrayView2<'_, f64>) -> Tensor {
    Tensor {
        shape: vec![w.nrows(), w.ncols()],
        data: w.iter().cloned().collect(),
    }
}

/// Mean ArcFace loss of a batch of unit embeddings (`B × D`) against class
/// weights `w` (`D × C`).
pub fn arcface_loss(
    emb: ArrayView2<'_, f64>,
    labels: &[usize],
    w: ArrayView2<'_, f64>,
    cfg: &ArcFaceConfig,
) -> Result<ArcFaceOutput, EmbedderError> {
    Ok(arcface_backward(emb, labels, w, cfg)?.0)
}

/// Loss plus gradients with respect to the embeddings and the class weights.
pub fn arcface_backward(
    emb: ArrayView2<'_, f64>,
    labels: &[usize],
    w: ArrayView2<'_, f64>,
    cfg: &ArcFaceConfig,
) -> Result<(ArcFaceOutput, Array2<f64>, Array2<f64>), EmbedderError> {
    check_batch(&emb, labels)?;
    let head = Head::new(&tensor_from(w), cfg)?;
    let (b, d, c) = (emb.nrows(), emb.ncols(), head.n_classes());
    let mut logits = Array2::zeros((b, c));
    let mut cosines = Array2::zeros((b, c));
    let mut d_emb = Array2::zeros((b, d));
    let mut d_w = vec![0.0; d * c];
    let mut total = 0.0;
    let scale = 1.0 / b as f64;
    for (i, &label) in labels.iter().enumerate() {
        let x: Vec<f64> = emb.row(i).to_vec();
        let mut dx = vec![0.0; d];
        let (out, l, cos) = head.row(&x, label, scale, Some((&mut dx, &mut d_w)))?;
        total += out.loss;
        logits.row_mut(i).assign(&ndarray::ArrayView1::from(&l));
        cosines.row_mut(i).assign(&ndarray::ArrayView1::from(&cos));
        d_emb.row_mut(i).assign(&ndarray::ArrayView1::from(&dx));
    }
    let d_w = Array2::from_shape_vec((d, c), d_w).expect("D x C");
    Ok((
        ArcFaceOutput {
            loss: total * scale,
            logits,
            cosines,
        },
        d_emb,
        d_w,
    ))
}
