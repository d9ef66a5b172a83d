//! Forward and backward passes.
//!
//! Feature maps are `[channels][time][mel]` row-major `f64` buffers. Each
//! block computes `pool(relu(conv3x3(x)) + shortcut(x))` where the shortcut
//! is the identity, a 1×1 projection when the channel count changes, or
//! absent for non-residual blocks. The last map is reduced per
//! [`HeadPooling`] before the projection.

use ndarray::ArrayView2;

use super::params::{BlockParams, EmbedderParams};
use super::{EmbedderConfig, EmbedderError, HeadPooling};

const INPUT_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

#[derive(Clone, Debug)]
struct BlockCache {
    input: Map,
    pre: Vec<f64>,
}

/// Intermediate values kept for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    features: Vec<f64>,
    raw_norm: f64,
    embedding: Vec<f64>,
}

impl ForwardCache {
    /// The unit-norm output vector.
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    /// Which ReLU units are active, over every block in order. Two inputs
    /// with equal patterns lie on the same linear piece of the network.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.blocks.iter().flat_map(|b| b.pre.iter().map(|&v| v > 0.0)).collect()
    }
}

/// Per-patch standardization to zero mean and unit variance.
fn standardize(patch: ArrayView2<'_, f32>) -> Map {
    let (h, w) = patch.dim();
    let n = (h * w) as f64;
    let mean = patch.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = patch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + INPUT_EPS).sqrt();
    Map {
        c: 1,
        h,
        w,
        data: patch.iter().map(|&v| (v as f64 - mean) * inv).collect(),
    }
}

/// Row and column ranges of output positions whose tap at offset
/// (`dy`, `dx`) lands inside the input.
#[inline]
fn tap_ranges(h: usize, w: usize, dy: isize, dx: isize) -> (usize, usize, usize, usize) {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy.max(0)) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)) as usize;
    (y0, y1, x0, x1)
}

fn conv3x3(input: &Map, weight: &[f64], bias: &[f64], c_out: usize) -> Vec<f64> {
    let (h, w, hw) = (input.h, input.w, input.h * input.w);
    let mut out = vec![0.0; c_out * hw];
    for o in 0..c_out {
        let dst = &mut out[o * hw..(o + 1) * hw];
        dst.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..input.c {
            let src = &input.data[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = weight[((o * input.c + i) * 3 + ky) * 3 + kx];
                    let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                    let (y0, y1, x0, x1) = tap_ranges(h, w, dy, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let d = &mut dst[y * w + x0..y * w + x1];
                        let s = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (a, b) in d.iter_mut().zip(s) {
                            *a += k * b;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates kernel, bias and (optionally) input gradients of a 3×3 conv.
fn conv3x3_backward(
    input: &Map,
    weight: &[f64],
    d_out: &[f64],
    c_out: usize,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    mut d_input: Option<&mut [f64]>,
) {
    let (h, w, hw) = (input.h, input.w, input.h * input.w);
    for o in 0..c_out {
        let g = &d_out[o * hw..(o + 1) * hw];
        d_bias[o] += g.iter().sum::<f64>();
        for i in 0..input.c {
            let src = &input.data[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((o * input.c + i) * 3 + ky) * 3 + kx;
                    let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                    let (y0, y1, x0, x1) = tap_ranges(h, w, dy, dx);
                    let sx0 = (x0 as isize + dx) as usize;
                    let n = x1 - x0;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let gr = &g[y * w + x0..y * w + x1];
                        let sr = &src[sy * w + sx0..sy * w + sx0 + n];
                        acc += gr.iter().zip(sr).map(|(a, b)| a * b).sum::<f64>();
                    }
                    d_weight[widx] += acc;
                    if let Some(di) = d_input.as_deref_mut() {
                        let k = weight[widx];
                        let dst = &mut di[i * hw..(i + 1) * hw];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let gr = &g[y * w + x0..y * w + x1];
                            let dr = &mut dst[sy * w + sx0..sy * w + sx0 + n];
                            for (a, b) in dr.iter_mut().zip(gr) {
                                *a += k * b;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 average pool; odd trailing rows/columns are dropped.
fn avg_pool(c: usize, h: usize, w: usize, data: &[f64]) -> Map {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        let src = &data[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h2 * w2..(ch + 1) * h2 * w2];
        for y in 0..h2 {
            let r0 = &src[2 * y * w..2 * y * w + w];
            let r1 = &src[(2 * y + 1) * w..(2 * y + 1) * w + w];
            for x in 0..w2 {
                dst[y * w2 + x] = 0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
            }
        }
    }
    Map { c, h: h2, w: w2, data: out }
}

fn avg_pool_backward(c: usize, h: usize, w: usize, d_out: &[f64]) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut d = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = &d_out[ch * h2 * w2..(ch + 1) * h2 * w2];
        let dst = &mut d[ch * h * w..(ch + 1) * h * w];
        for y in 0..h2 {
            for x in 0..w2 {
                let v = 0.25 * g[y * w2 + x];
                dst[2 * y * w + 2 * x] = v;
                dst[2 * y * w + 2 * x + 1] = v;
                dst[(2 * y + 1) * w + 2 * x] = v;
                dst[(2 * y + 1) * w + 2 * x + 1] = v;
            }
        }
    }
    d
}

/// Output slot of each map position and the number of positions per slot.
fn pool_slots(mode: HeadPooling, h: usize, w: usize) -> (impl Fn(usize, usize, usize) -> usize, usize) {
    let count = match mode {
        HeadPooling::Global => h * w,
        HeadPooling::Time => h,
        HeadPooling::Flatten => 1,
    };
    let slot = move |c: usize, y: usize, x: usize| match mode {
        HeadPooling::Global => c,
        HeadPooling::Time => c * w + x,
        HeadPooling::Flatten => (c * h + y) * w + x,
    };
    (slot, count)
}

fn head_pool(mode: HeadPooling, x: &Map, len: usize) -> Vec<f64> {
    let (slot, count) = pool_slots(mode, x.h, x.w);
    let mut out = vec![0.0; len];
    for c in 0..x.c {
        for y in 0..x.h {
            for i in 0..x.w {
                out[slot(c, y, i)] += x.data[(c * x.h + y) * x.w + i];
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= count as f64);
    out
}

fn head_pool_backward(mode: HeadPooling, c: usize, h: usize, w: usize, d_out: &[f64]) -> Vec<f64> {
    let (slot, count) = pool_slots(mode, h, w);
    let mut d = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for i in 0..w {
                d[(ch * h + y) * w + i] = d_out[slot(ch, y, i)] / count as f64;
            }
        }
    }
    d
}

fn block_forward(b: &BlockParams, residual: bool, c_out: usize, x: &Map) -> (Vec<f64>, Map) {
    let hw = x.h * x.w;
    let pre = conv3x3(x, &b.conv_w.data, &b.conv_b.data, c_out);
    let mut y: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
    if residual {
        match &b.shortcut {
            Some(p) => {
                for o in 0..c_out {
                    let dst = &mut y[o * hw..(o + 1) * hw];
                    for i in 0..x.c {
                        let k = p.data[o * x.c + i];
                        for (a, s) in dst.iter_mut().zip(&x.data[i * hw..(i + 1) * hw]) {
                            *a += k * s;
                        }
                    }
                }
            }
            None => {
                for (a, s) in y.iter_mut().zip(&x.data) {
                    *a += s;
                }
            }
        }
    }
    let out = avg_pool(c_out, x.h, x.w, &y);
    (pre, out)
}

/// Runs the network on one `T × n_mels` patch.
pub fn forward(
    params: &EmbedderParams,
    cfg: &EmbedderConfig,
    patch: ArrayView2<'_, f32>,
) -> Result<ForwardCache, EmbedderError> {
    if patch.dim() != (cfg.input_frames, cfg.n_mels) {
        return Err(EmbedderError::ShapeError(format!(
            "patch is {:?}, expected ({}, {})",
            patch.dim(),
            cfg.input_frames,
            cfg.n_mels
        )));
    }
    if patch.iter().any(|v| !v.is_finite()) {
        return Err(EmbedderError::ShapeError("patch has non-finite values".into()));
    }
    let mut x = standardize(patch);
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for (b, spec) in params.blocks.iter().zip(&cfg.blocks) {
        let (pre, out) = block_forward(b, spec.residual, spec.channels, &x);
        blocks.push(BlockCache { input: x, pre });
        x = out;
    }
    let features = head_pool(cfg.pooling, &x, cfg.feature_len());
    let d = cfg.embed_dim;
    let mut raw = params.proj_b.data.clone();
    for (ch, g) in features.iter().enumerate() {
        let row = &params.proj_w.data[ch * d..(ch + 1) * d];
        for (r, w) in raw.iter_mut().zip(row) {
            *r += g * w;
        }
    }
    let raw_norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if raw_norm == 0.0 || !raw_norm.is_finite() {
        return Err(EmbedderError::ZeroVector);
    }
    let embedding = raw.iter().map(|v| v / raw_norm).collect();
    Ok(ForwardCache {
        blocks,
        features,
        raw_norm,
        embedding,
    })
}

/// Accumulates into `grads` the gradient of a scalar loss with respect to
/// every network parameter, given `d_embedding` = dLoss/d(unit embedding).
/// The class-weight gradient is the head's business and is not touched.
pub fn backward(
    params: &EmbedderParams,
    cfg: &EmbedderConfig,
    cache: &ForwardCache,
    d_embedding: &[f64],
    grads: &mut EmbedderParams,
) {
    let d = cfg.embed_dim;
    let u = &cache.embedding;
    // u = e / |e|  =>  de = (du - u (u . du)) / |e|
    let dot: f64 = u.iter().zip(d_embedding).map(|(a, b)| a * b).sum();
    let d_raw: Vec<f64> = u
        .iter()
        .zip(d_embedding)
        .map(|(ui, gi)| (gi - ui * dot) / cache.raw_norm)
        .collect();
    for (g, v) in grads.proj_b.data.iter_mut().zip(&d_raw) {
        *g += v;
    }
    let n_feat = cache.features.len();
    let mut d_pooled = vec![0.0; n_feat];
    for (ch, (dp, &p)) in d_pooled.iter_mut().zip(&cache.features).enumerate() {
        let row = &params.proj_w.data[ch * d..(ch + 1) * d];
        let grow = &mut grads.proj_w.data[ch * d..(ch + 1) * d];
        let mut acc = 0.0;
        for ((gw, w), dr) in grow.iter_mut().zip(row).zip(&d_raw) {
            *gw += p * dr;
            acc += w * dr;
        }
        *dp = acc;
    }
    let mut d_x = {
        let (h, w) = cfg.last_map();
        head_pool_backward(cfg.pooling, cfg.last_channels(), h, w, &d_pooled)
    };

    for (bi, bc) in cache.blocks.iter().enumerate().rev() {
        let spec = cfg.blocks[bi];
        let bp = &params.blocks[bi];
        let gb = &mut grads.blocks[bi];
        let x = &bc.input;
        let (c_out, hw) = (spec.channels, x.h * x.w);
        let d_y = avg_pool_backward(c_out, x.h, x.w, &d_x);
        let d_pre: Vec<f64> = d_y
            .iter()
            .zip(&bc.pre)
            .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
            .collect();
        let first = bi == 0;
        let mut d_in = if first { Vec::new() } else { vec![0.0; x.c * hw] };
        if spec.residual && !first {
            match (&bp.shortcut, gb.shortcut.as_mut()) {
                (Some(p), Some(gp)) => {
                    for o in 0..c_out {
                        let g = &d_y[o * hw..(o + 1) * hw];
                        for i in 0..x.c {
                            let s = &x.data[i * hw..(i + 1) * hw];
                            gp.data[o * x.c + i] += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                            let k = p.data[o * x.c + i];
                            for (di, gi) in d_in[i * hw..(i + 1) * hw].iter_mut().zip(g) {
                                *di += k * gi;
                            }
                        }
                    }
                }
                _ => {
                    for (di, gi) in d_in.iter_mut().zip(&d_y) {
                        *di += gi;
                    }
                }
            }
        } else if spec.residual {
            // first block: the input is data, only the projection needs a gradient
            if let Some(gp) = gb.shortcut.as_mut() {
                for o in 0..c_out {
                    let g = &d_y[o * hw..(o + 1) * hw];
                    for i in 0..x.c {
                        let s = &x.data[i * hw..(i + 1) * hw];
                        gp.data[o * x.c + i] += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
        conv3x3_backward(
            x,
            &bp.conv_w.data,
            &d_pre,
            c_out,
            &mut gb.conv_w.data,
            &mut gb.conv_b.data,
            if first { None } else { Some(&mut d_in) },
        );
        d_x = d_in;
    }
}
