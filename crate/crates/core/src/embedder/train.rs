//! Fixed-length patching, SGD and the training loop.

use std::fmt::Write as _;

use log::info;
use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::arcface::Head;
use super::net::{backward, forward};
use super::params::{EmbedderParams, TensorKind};
use super::{ArcFaceConfig, EmbedderConfig, EmbedderError, TrainConfig};
use crate::par::{self, Execution};
use crate::rng;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const CROP_STREAM: u64 = 0x4352_4f50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    /// Uniformly random crop offset.
    Train,
    /// Center crop.
    Infer,
}

/// Crops or pads a `frames × mels` matrix to exactly `t` frames.
///
/// Longer inputs are cropped (random offset in `Train` mode, centered in
/// `Infer` mode or when no generator is given). Shorter inputs are padded
/// with `pad_value` on both sides, the extra frame going to the right.
pub fn fix_length(
    m: ArrayView2<'_, f32>,
    t: usize,
    mode: CropMode,
    pad_value: f32,
    rng: Option<&mut rng::Rng>,
) -> Array2<f32> {
    let (n, mels) = m.dim();
    if n >= t {
        let start = match (mode, rng) {
            (CropMode::Train, Some(r)) => r.random_range(0..=n - t),
            _ => (n - t) / 2,
        };
        return m.slice(s![start..start + t, ..]).to_owned();
    }
    let left = (t - n) / 2;
    let mut out = Array2::from_elem((t, mels), pad_value);
    out.slice_mut(s![left..left + n, ..]).assign(&m);
    out
}

/// `p ← p − lr_e·(g + weight_decay·p)` for weights, `p ← p − lr_e·g` for
/// biases, with `lr_e` from the step schedule.
pub fn sgd_step(params: &mut EmbedderParams, grads: &EmbedderParams, t: &TrainConfig, epoch: usize) {
    let lr = t.lr_at(epoch);
    let grads: Vec<_> = grads.named().into_iter().map(|(_, g, _)| g).collect();
    for ((p, kind), g) in params.tensors_mut().into_iter().zip(grads) {
        let wd = match kind {
            TensorKind::Weight => t.weight_decay,
            TensorKind::ClassWeight if t.decay_class_weights => t.weight_decay,
            _ => 0.0,
        };
        for (pv, gv) in p.data.iter_mut().zip(&g.data) {
            *pv -= lr * (gv + wd * *pv);
        }
    }
}

/// Momentum form of [`sgd_step`]: `v ← μ·v + (g + weight_decay·p)`,
/// `p ← p − lr_e·v`. With zero initial velocity the first step equals
/// [`sgd_step`], and with `μ = 0` every step does.
pub fn sgd_momentum_step(
    params: &mut EmbedderParams,
    grads: &EmbedderParams,
    velocity: &mut EmbedderParams,
    t: &TrainConfig,
    epoch: usize,
) {
    let lr = t.lr_at(epoch);
    let grads: Vec<_> = grads.named().into_iter().map(|(_, g, _)| g).collect();
    for (((p, kind), (v, _)), g) in params.tensors_mut().into_iter().zip(velocity.tensors_mut()).zip(grads) {
        let wd = match kind {
            TensorKind::Weight => t.weight_decay,
            TensorKind::ClassWeight if t.decay_class_weights => t.weight_decay,
            _ => 0.0,
        };
        for ((pv, vv), gv) in p.data.iter_mut().zip(v.data.iter_mut()).zip(&g.data) {
            *vv = t.momentum * *vv + (gv + wd * *pv);
            *pv -= lr * *vv;
        }
    }
}

/// A variable-length log-mel matrix with its class index.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledMel {
    pub values: Array2<f32>,
    pub label: usize,
}

/// Batch-mean ArcFace loss gradient over fixed-size patches.
///
/// Returns `(gradients, summed per-sample loss, correctly classified count)`.
/// Per-sample gradients may be computed in parallel; they are summed in
/// sample order so the result does not depend on `exec`.
pub fn batch_gradients(
    params: &EmbedderParams,
    ecfg: &EmbedderConfig,
    acfg: &ArcFaceConfig,
    patches: &[Array2<f32>],
    labels: &[usize],
    exec: Execution,
) -> Result<(EmbedderParams, f64, usize), EmbedderError> {
    if patches.len() != labels.len() || patches.is_empty() {
        return Err(EmbedderError::ShapeError(format!(
            "{} patches vs {} labels",
            patches.len(),
            labels.len()
        )));
    }
    let head = Head::new(&params.class_w, acfg)?;
    let weight = 1.0 / patches.len() as f64;
    let idx: Vec<usize> = (0..patches.len()).collect();
    let per_sample = par::map(exec, &idx, |&i| -> Result<_, EmbedderError> {
        let cache = forward(params, ecfg, patches[i].view())?;
        let mut g = params.zeros_like();
        let mut d_u = vec![0.0; ecfg.embed_dim];
        let (row, _, _) = head.row(
            cache.embedding(),
            labels[i],
            weight,
            Some((&mut d_u, &mut g.class_w.data)),
        )?;
        backward(params, ecfg, &cache, &d_u, &mut g);
        Ok((g, row.loss, row.correct))
    });
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    let mut correct = 0;
    for r in per_sample {
        let (g, l, c) = r?;
        total.add_assign(&g);
        loss += l;
        correct += usize::from(c);
    }
    Ok((total, loss, correct))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean ArcFace loss over the epoch.
    pub loss: f64,
    /// Fraction of samples whose largest margin-free cosine was the true class.
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,loss,accuracy\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:e},{:.10},{:.6}", e.epoch, e.lr, e.loss, e.accuracy);
        }
        s
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

fn check_data(samples: &[LabeledMel], acfg: &ArcFaceConfig) -> Result<usize, EmbedderError> {
    let n_classes = if acfg.n_classes == 0 {
        samples.iter().map(|s| s.label + 1).max().unwrap_or(0)
    } else {
        acfg.n_classes
    };
    if n_classes < 2 {
        return Err(EmbedderError::InsufficientData(format!(
            "need at least 2 classes, have {n_classes}"
        )));
    }
    let mut seen = vec![false; n_classes];
    for s in samples {
        if s.label >= n_classes {
            return Err(EmbedderError::BadLabel {
                label: s.label,
                n_classes,
            });
        }
        seen[s.label] = true;
    }
    if let Some(c) = seen.iter().position(|&x| !x) {
        return Err(EmbedderError::InsufficientData(format!("class {c} has no samples")));
    }
    Ok(n_classes)
}

/// Trains from freshly initialized parameters.
///
/// `acfg.n_classes == 0` means "one more than the largest label".
/// Runs single-threaded; [`train_with`] gives the same result in parallel.
pub fn train(
    samples: &[LabeledMel],
    pad_value: f32,
    ecfg: &EmbedderConfig,
    acfg: &ArcFaceConfig,
    tcfg: &TrainConfig,
) -> Result<(EmbedderParams, TrainHistory), EmbedderError> {
    train_with(samples, pad_value, ecfg, acfg, tcfg, Execution::Sequential)
}

pub fn train_with(
    samples: &[LabeledMel],
    pad_value: f32,
    ecfg: &EmbedderConfig,
    acfg: &ArcFaceConfig,
    tcfg: &TrainConfig,
    exec: Execution,
) -> Result<(EmbedderParams, TrainHistory), EmbedderError> {
    ecfg.validate()?;
    acfg.validate()?;
    tcfg.validate()?;
    let n_classes = check_data(samples, acfg)?;
    let acfg = ArcFaceConfig { n_classes, ..acfg.clone() };
    if let Some(s) = samples.iter().find(|s| s.values.ncols() != ecfg.n_mels) {
        return Err(EmbedderError::ShapeError(format!(
            "sample has {} mel bins, embedder expects {}",
            s.values.ncols(),
            ecfg.n_mels
        )));
    }
    let mut params = EmbedderParams::init(ecfg, n_classes)?;
    let mut velocity = params.zeros_like();
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..tcfg.epochs {
        let mut shuffle = rng::stream(tcfg.rng_seed, &[SHUFFLE_STREAM, epoch as u64]);
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        let (mut loss, mut correct) = (0.0, 0usize);
        for batch in order.chunks(tcfg.batch_size) {
            let patches: Vec<Array2<f32>> = batch
                .iter()
                .map(|&i| {
                    let mut r = rng::stream(tcfg.rng_seed, &[CROP_STREAM, epoch as u64, i as u64]);
                    fix_length(
                        samples[i].values.view(),
                        ecfg.input_frames,
                        CropMode::Train,
                        pad_value,
                        Some(&mut r),
                    )
                })
                .collect();
            let labels: Vec<usize> = batch.iter().map(|&i| samples[i].label).collect();
            let (grads, l, c) = batch_gradients(&params, ecfg, &acfg, &patches, &labels, exec)?;
            sgd_momentum_step(&mut params, &grads, &mut velocity, tcfg, epoch);
            loss += l;
            correct += c;
        }
        if !params.is_finite() {
            return Err(EmbedderError::InvalidConfig(format!(
                "training diverged at epoch {epoch} (non-finite parameters)"
            )));
        }
        let stats = EpochStats {
            epoch,
            lr: tcfg.lr_at(epoch),
            loss: loss / samples.len() as f64,
            accuracy: correct as f64 / samples.len() as f64,
        };
        info!(
            "epoch {:>3}  lr {:.2e}  loss {:.5}  acc {:.4}",
            stats.epoch, stats.lr, stats.loss, stats.accuracy
        );
        history.epochs.push(stats);
    }
    Ok((params, history))
}
