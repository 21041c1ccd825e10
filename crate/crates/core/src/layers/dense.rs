use rand_chacha::ChaCha8Rng;

use super::{class_scores, max_unit_norm_error, normalize_rows, random_prototypes, uniform_fan_in};
use super::{ClassScores, HeadOptions, LossPlacement, ProtoSet};
use crate::error::{HffError, Result};
use crate::optim::ProtoEma;
use crate::tensor::{matmul_nt, Scalar, Tensor};

/// Fully connected HFF layer: affine map, activation, hyperspherical
/// projection and a class-prototype head.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    /// `Dout x Din`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    /// `C x P x Dout`, unit-norm rows.
    pub protos: Tensor<T>,
    pub ema: ProtoEma<T>,
    pub opts: HeadOptions,
}

/// Everything the dense backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct DenseForward<T> {
    pub f: Tensor<T>,
    pub h: Tensor<T>,
    pub h_norm: Tensor<T>,
    /// Unit feature the loss reads: `h_norm` post-activation, `f / ||f||` pre-activation.
    pub feat_unit: Tensor<T>,
    pub feat_len: Vec<T>,
    pub scores: ClassScores<T>,
}

impl<T: Scalar> DenseForward<T> {
    /// What the next layer receives.
    pub fn into_next_input(self, scale_input: bool) -> Tensor<T> {
        if scale_input {
            self.h
        } else {
            self.h_norm
        }
    }
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        classes: usize,
        per_class: usize,
        opts: HeadOptions,
        ema_decay: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        opts.validate()?;
        if in_dim == 0 || out_dim == 0 {
            return Err(HffError::config("dense layer widths must be positive"));
        }
        let weight = uniform_fan_in(&[out_dim, in_dim], in_dim, rng);
        let bias = uniform_fan_in(&[out_dim], in_dim, rng);
        let protos = random_prototypes(classes, per_class, out_dim, rng)?;
        Self::from_parts(weight, bias, protos, opts, ema_decay)
    }

    /// Assembles a layer from explicit parameters; the EMA shadow starts at
    /// the prototypes.
    pub fn from_parts(
        weight: Tensor<T>,
        bias: Tensor<T>,
        protos: Tensor<T>,
        opts: HeadOptions,
        ema_decay: f64,
    ) -> Result<Self> {
        let ema = ProtoEma::new(protos.clone(), ema_decay)?;
        let layer = DenseLayer { weight, bias, protos, ema, opts };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        self.opts.validate()?;
        if self.weight.rank() != 2 {
            return Err(HffError::dim(format!("dense weight must be a matrix, got {:?}", self.weight.shape())));
        }
        let out = self.weight.dim(0);
        if self.bias.shape() != [out] {
            return Err(HffError::dim(format!(
                "bias {:?} does not match weight {:?}",
                self.bias.shape(),
                self.weight.shape()
            )));
        }
        if self.protos.rank() != 3 || self.protos.dim(2) != out {
            return Err(HffError::dim(format!("prototypes {:?} must be C x P x {out}", self.protos.shape())));
        }
        if self.protos.dim(0) < 2 || self.protos.dim(1) < 1 {
            return Err(HffError::config("need C >= 2 classes and P >= 1 prototypes"));
        }
        if self.ema.shadow.shape() != self.protos.shape() {
            return Err(HffError::dim("EMA shadow does not match prototypes"));
        }
        if max_unit_norm_error(&self.protos) > 1e-6 {
            return Err(HffError::config("prototype rows must have unit norm"));
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn classes(&self) -> usize {
        self.protos.dim(0)
    }

    pub fn per_class(&self) -> usize {
        self.protos.dim(1)
    }

    pub fn protos_for(&self, set: ProtoSet) -> &Tensor<T> {
        match set {
            ProtoSet::Raw => &self.protos,
            ProtoSet::Ema => &self.ema.shadow,
        }
    }

    /// `f = h_in W^T + b`, `h = sigma(f)`, `h_norm = h / ||h||` row-wise (a
    /// zero row stays zero), then prototype scores on the loss feature.
    pub fn forward(&self, input: &Tensor<T>, set: ProtoSet) -> Result<DenseForward<T>> {
        if input.rank() != 2 || input.dim(1) != self.in_dim() {
            return Err(HffError::dim(format!(
                "dense layer expects B x {} input, got {:?}",
                self.in_dim(),
                input.shape()
            )));
        }
        let mut f = matmul_nt(input, &self.weight)?;
        let width = self.out_dim();
        for row in f.data_mut().chunks_mut(width) {
            row.iter_mut().zip(self.bias.data()).for_each(|(x, &b)| *x = *x + b);
        }
        let act = self.opts.activation;
        let h = f.map(|x| act.apply(x));
        let mut h_norm = h.clone();
        let h_len = normalize_rows(&mut h_norm);
        let (feat_unit, feat_len) = match self.opts.placement {
            LossPlacement::PostActivation => (h_norm.clone(), h_len),
            LossPlacement::PreActivation => {
                let mut fu = f.clone();
                let len = normalize_rows(&mut fu);
                (fu, len)
            }
        };
        let scores = class_scores(self.protos_for(set), &feat_unit, self.opts.tau, self.opts.scale_sims, &feat_len)?;
        Ok(DenseForward { f: f.check_finite("dense affine map")?, h, h_norm, feat_unit, feat_len, scores })
    }
}
