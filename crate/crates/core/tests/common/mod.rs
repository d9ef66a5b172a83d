//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use humsearch::embedder::{arcface_loss, batch_gradients, forward, BlockSpec, EmbedderParams, HeadPooling};
use humsearch::rng;
use humsearch::{ArcFaceConfig, EmbedderConfig, Execution};
use ndarray::Array2;
use rand::Rng;

/// The small model used for finite-difference checks.
pub fn gradcheck_config(seed: u64, pooling: HeadPooling) -> EmbedderConfig {
    EmbedderConfig {
        input_frames: 32,
        n_mels: 16,
        blocks: vec![
            BlockSpec { channels: 4, residual: true },
            BlockSpec { channels: 6, residual: true },
        ],
        embed_dim: 8,
        pooling,
        rng_seed: seed,
    }
}

pub fn random_batch(cfg: &EmbedderConfig, n_classes: usize, batch: usize, seed: u64) -> (Vec<Array2<f32>>, Vec<usize>) {
    let mut r = rng::stream(seed, &[0xba7c]);
    let patches = (0..batch)
        .map(|_| Array2::from_shape_fn((cfg.input_frames, cfg.n_mels), |_| r.random_range(-3.0f32..3.0)))
        .collect();
    let labels = (0..batch).map(|i| i % n_classes).collect();
    (patches, labels)
}

/// Batch-mean ArcFace loss of the full model.
pub fn full_loss(
    params: &EmbedderParams,
    cfg: &EmbedderConfig,
    acfg: &ArcFaceConfig,
    patches: &[Array2<f32>],
    labels: &[usize],
) -> f64 {
    loss_and_pattern(params, cfg, acfg, patches, labels).0
}

/// Loss plus the ReLU activation pattern over the whole batch.
pub fn loss_and_pattern(
    params: &EmbedderParams,
    cfg: &EmbedderConfig,
    acfg: &ArcFaceConfig,
    patches: &[Array2<f32>],
    labels: &[usize],
) -> (f64, Vec<bool>) {
    let mut pattern = Vec::new();
    let rows: Vec<Vec<f64>> = patches
        .iter()
        .map(|p| {
            let cache = forward(params, cfg, p.view()).unwrap();
            pattern.extend(cache.relu_pattern());
            cache.embedding().to_vec()
        })
        .collect();
    let emb = Array2::from_shape_fn((rows.len(), cfg.embed_dim), |(i, j)| rows[i][j]);
    let w = Array2::from_shape_vec(
        (params.class_w.shape[0], params.class_w.shape[1]),
        params.class_w.data.clone(),
    )
    .unwrap();
    (arcface_loss(emb.view(), labels, w.view(), acfg).unwrap().loss, pattern)
}

/// Outcome of a central-difference sweep over every parameter coordinate.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Coordinates whose ±h interval crosses a ReLU kink; these were checked
    /// at the largest step `h/10^j` that stays on one linear piece.
    pub kink_crossings: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
}

/// Compares analytic gradients with central differences on every
/// coordinate. A coordinate passes when its absolute error is at most
/// `abs_floor` or its relative error is at most `rel_tol`.
///
/// Central differences only measure the derivative when both probes stay on
/// the same linear piece as the base point; when `±h` flips a ReLU, the step
/// is divided by 10 until it does not (down to `h·1e-4`).
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub fn gradient_check(
    cfg: &EmbedderConfig,
    acfg: &ArcFaceConfig,
    params: &EmbedderParams,
    patches: &[Array2<f32>],
    labels: &[usize],
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> GradCheck {
    let (grads, _, _) = batch_gradients(params, cfg, acfg, patches, labels, Execution::Sequential).unwrap();
    let analytic: Vec<(String, Vec<f64>)> =
        grads.named().into_iter().map(|(n, t, _)| (n, t.data.clone())).collect();
    let (_, base_pattern) = loss_and_pattern(params, cfg, acfg, patches, labels);
    let mut out = GradCheck::default();
    let mut p = params.clone();
    for (ti, (name, a)) in analytic.iter().enumerate() {
        for k in 0..a.len() {
            let orig = p.tensors_mut()[ti].0.data[k];
            let mut step = h;
            let mut numeric = None;
            for _ in 0..5 {
                p.tensors_mut()[ti].0.data[k] = orig + step;
                let (up, pu) = loss_and_pattern(&p, cfg, acfg, patches, labels);
                p.tensors_mut()[ti].0.data[k] = orig - step;
                let (down, pd) = loss_and_pattern(&p, cfg, acfg, patches, labels);
                p.tensors_mut()[ti].0.data[k] = orig;
                if pu == base_pattern && pd == base_pattern {
                    numeric = Some((up - down) / (2.0 * step));
                    break;
                }
                step /= 10.0;
            }
            out.checked += 1;
            if step != h {
                out.kink_crossings += 1;
            }
            let Some(numeric) = numeric else {
                out.failures.push(format!("{name}[{k}]: every probe step crosses a kink"));
                continue;
            };
            let abs = (a[k] - numeric).abs();
            let rel = abs / a[k].abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            if abs > abs_floor {
                out.worst_rel = out.worst_rel.max(rel);
                if rel > rel_tol {
                    out.failures.push(format!(
                        "{name}[{k}]: analytic {:.9e} numeric {numeric:.9e} (step {step:e}) rel {rel:.2e}",
                        a[k]
                    ));
                }
            }
        }
    }
    out
}

/// Random gallery with engineered ties: about a quarter of the rows repeat
/// an earlier row, and coordinates come from a small grid so distinct rows
/// also collide in distance.
pub fn tied_gallery(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut r = rng::stream(seed, &[0x7165]);
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 && r.random_bool(0.25) {
            let j = r.random_range(0..i);
            rows.push(rows[j].clone());
        } else {
            rows.push((0..dim).map(|_| r.random_range(-2i32..=2) as f32 * 0.5).collect());
        }
    }
    rows
}

/// Naive full scan: `(internal id, squared distance)` for the `k` nearest,
/// sorted by distance then id.
pub fn brute_force(rows: &[Vec<f32>], q: &[f32], k: usize) -> Vec<(u32, f64)> {
    let mut all: Vec<(u32, f64)> = rows
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let d = v.iter().zip(q).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            (i as u32, d)
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

pub fn flat_of(rows: &[Vec<f32>]) -> humsearch::FlatIndex {
    let mut f = humsearch::FlatIndex::new(rows[0].len());
    for (i, v) in rows.iter().enumerate() {
        f.add(format!("v{i}"), v).unwrap();
    }
    f
}

pub fn unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut r = rng::stream(seed, &[0x756e]);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / n) as f32).collect()
        })
        .collect()
}

/// Fraction of the flat top-k found by `got`, averaged over queries.
pub fn recall_vs_flat(flat: &[humsearch::SearchResult], got: &[humsearch::SearchResult]) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for (f, g) in flat.iter().zip(got) {
        total += f.hits.len();
        hit += f.hits.iter().filter(|h| g.hits.iter().any(|x| x.internal_id == h.internal_id)).count();
    }
    hit as f64 / total as f64
}
