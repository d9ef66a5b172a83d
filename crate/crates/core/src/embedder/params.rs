use rand_distr::{Distribution, Normal};

use super::{EmbedderConfig, EmbedderError};
use crate::rng;

/// Dense row-major `f64` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn normal(shape: &[usize], std: f64, r: &mut rng::Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| dist.sample(r)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    /// `[out, in, 3, 3]`
    pub conv_w: Tensor,
    /// `[out]`
    pub conv_b: Tensor,
    /// 1×1 projection `[out, in]`, present when a residual block changes
    /// channel count.
    pub shortcut: Option<Tensor>,
}

/// All trainable tensors. The same type doubles as a gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderParams {
    pub blocks: Vec<BlockParams>,
    /// `[last_channels × last_mels, embed_dim]`
    pub proj_w: Tensor,
    /// `[embed_dim]`
    pub proj_b: Tensor,
    /// Class weights `[embed_dim, n_classes]`; columns are normalized at use.
    pub class_w: Tensor,
}

const INIT_STREAM: u64 = 0x494e_4954;

impl EmbedderParams {
    /// He-normal convolutions, scaled-normal projections (class columns of
    /// roughly unit norm), zero biases.
    pub fn init(cfg: &EmbedderConfig, n_classes: usize) -> Result<Self, EmbedderError> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.rng_seed, &[INIT_STREAM]);
        let mut c_in = 1;
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        for spec in &cfg.blocks {
            let c_out = spec.channels;
            let conv_w = Tensor::normal(&[c_out, c_in, 3, 3], (2.0 / (9 * c_in) as f64).sqrt(), &mut r);
            let shortcut = (spec.residual && c_in != c_out)
                .then(|| Tensor::normal(&[c_out, c_in], (1.0 / c_in as f64).sqrt(), &mut r));
            blocks.push(BlockParams {
                conv_w,
                conv_b: Tensor::zeros(&[c_out]),
                shortcut,
            });
            c_in = c_out;
        }
        let f = cfg.feature_len();
        let proj_w = Tensor::normal(&[f, cfg.embed_dim], (1.0 / f as f64).sqrt(), &mut r);
        let class_w = Tensor::normal(&[cfg.embed_dim, n_classes], (1.0 / cfg.embed_dim as f64).sqrt(), &mut r);
        Ok(Self {
            blocks,
            proj_w,
            proj_b: Tensor::zeros(&[cfg.embed_dim]),
            class_w,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(&t.shape);
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    conv_w: z(&b.conv_w),
                    conv_b: z(&b.conv_b),
                    shortcut: b.shortcut.as_ref().map(z),
                })
                .collect(),
            proj_w: z(&self.proj_w),
            proj_b: z(&self.proj_b),
            class_w: z(&self.class_w),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_w.shape[1]
    }

    /// Named tensors in checkpoint order, with a flag telling whether the
    /// tensor is a weight (subject to weight decay) rather than a bias.
    pub fn named(&self) -> Vec<(String, &Tensor, TensorKind)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.conv.weight"), &b.conv_w, TensorKind::Weight));
            out.push((format!("block{i}.conv.bias"), &b.conv_b, TensorKind::Bias));
            if let Some(s) = &b.shortcut {
                out.push((format!("block{i}.shortcut.weight"), s, TensorKind::Weight));
            }
        }
        out.push(("proj.weight".into(), &self.proj_w, TensorKind::Weight));
        out.push(("proj.bias".into(), &self.proj_b, TensorKind::Bias));
        out.push(("head.weight".into(), &self.class_w, TensorKind::ClassWeight));
        out
    }

    /// Mutable tensors in the same order as [`named`](Self::named).
    pub fn tensors_mut(&mut self) -> Vec<(&mut Tensor, TensorKind)> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push((&mut b.conv_w, TensorKind::Weight));
            out.push((&mut b.conv_b, TensorKind::Bias));
            if let Some(s) = &mut b.shortcut {
                out.push((s, TensorKind::Weight));
            }
        }
        out.push((&mut self.proj_w, TensorKind::Weight));
        out.push((&mut self.proj_b, TensorKind::Bias));
        out.push((&mut self.class_w, TensorKind::ClassWeight));
        out
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t, _)| t.len()).sum()
    }

    /// `self += other`, element by element in a fixed order.
    pub fn add_assign(&mut self, other: &EmbedderParams) {
        let src: Vec<&Tensor> = other.named().into_iter().map(|(_, t, _)| t).collect();
        for ((dst, _), s) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.data.iter_mut().zip(&s.data) {
                *d += v;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, t, _)| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn check_architecture(&self, cfg: &EmbedderConfig) -> Result<(), EmbedderError> {
        let err = |m: String| Err(EmbedderError::ShapeError(m));
        if self.blocks.len() != cfg.blocks.len() {
            return err(format!(
                "params have {} blocks, config has {}",
                self.blocks.len(),
                cfg.blocks.len()
            ));
        }
        let mut c_in = 1;
        for (i, (b, spec)) in self.blocks.iter().zip(&cfg.blocks).enumerate() {
            let c_out = spec.channels;
            if b.conv_w.shape != [c_out, c_in, 3, 3] || b.conv_b.shape != [c_out] {
                return err(format!("block {i}: conv shape {:?}", b.conv_w.shape));
            }
            let want_shortcut = spec.residual && c_in != c_out;
            match (&b.shortcut, want_shortcut) {
                (Some(s), true) if s.shape == [c_out, c_in] => {}
                (None, false) => {}
                _ => return err(format!("block {i}: shortcut does not match config")),
            }
            c_in = c_out;
        }
        if self.proj_w.shape != [cfg.feature_len(), cfg.embed_dim] || self.proj_b.shape != [cfg.embed_dim] {
            return err(format!("projection shape {:?}", self.proj_w.shape));
        }
        if self.class_w.shape.len() != 2 || self.class_w.shape[0] != cfg.embed_dim {
            return err(format!("class weight shape {:?}", self.class_w.shape));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    ClassWeight,
}
