//! HFF dense and convolutional layers, the baseline FF dense layer, and the
//! prototype scoring shared by both HFF layer kinds.

mod conv;
mod dense;
mod ff;
mod scores;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{HffError, Result};
use crate::tensor::{normalize_in_place, Scalar, Tensor};

pub use conv::{ConvForward, ConvLayer};
pub use dense::{DenseForward, DenseLayer};
pub use ff::{embed_label, embed_labels, ff_goodness, FfForward, FfLayer};
pub(crate) use scores::argmax;
pub use scores::{class_scores, lse, ClassScores, ScoreVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sin,
    Abs,
    Step,
}

impl Activation {
    pub const ALL: [Activation; 5] =
        [Activation::Relu, Activation::Tanh, Activation::Sin, Activation::Abs, Activation::Step];

    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Sin => x.sin(),
            Activation::Abs => x.abs(),
            Activation::Step => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    /// Derivative at `x`; the subgradient 0 is used at kinks. `step` has no
    /// usable derivative and reports 0 everywhere.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Sin => x.cos(),
            Activation::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Step => T::zero(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sin => "sin",
            Activation::Abs => "abs",
            Activation::Step => "step",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = HffError;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| HffError::config(format!("activation `{s}`; expected relu|tanh|sin|abs|step")))
    }
}

/// Where the local loss reads the layer's feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossPlacement {
    /// Loss on the normalized activation `sigma(f)`.
    PostActivation,
    /// Loss on the normalized affine output `f`; the nonlinearity only feeds
    /// the next layer.
    PreActivation,
}

impl LossPlacement {
    pub fn name(self) -> &'static str {
        match self {
            LossPlacement::PostActivation => "post",
            LossPlacement::PreActivation => "pre",
        }
    }
}

impl fmt::Display for LossPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossPlacement {
    type Err = HffError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "post" | "post_activation" => Ok(LossPlacement::PostActivation),
            "pre" | "pre_activation" => Ok(LossPlacement::PreActivation),
            _ => Err(HffError::config(format!("loss_placement `{s}`; expected post|pre"))),
        }
    }
}

/// Which prototype bank a forward pass scores against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtoSet {
    /// The gradient-trained prototypes.
    Raw,
    /// The exponential moving average shadow.
    Ema,
}

/// Options shared by every HFF layer kind.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadOptions {
    pub activation: Activation,
    pub placement: LossPlacement,
    /// Forward `h` instead of `h / ||h||` to the next layer.
    pub scale_input: bool,
    /// Multiply every prototype similarity by the feature length.
    pub scale_sims: bool,
    pub tau: f64,
}

impl HeadOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(HffError::config(format!("tau must be a positive finite real, got {}", self.tau)));
        }
        if self.activation == Activation::Step && self.placement == LossPlacement::PostActivation {
            return Err(HffError::config("the step activation has no gradient; use loss_placement = pre"));
        }
        Ok(())
    }
}

impl Default for HeadOptions {
    fn default() -> Self {
        HeadOptions {
            activation: Activation::Relu,
            placement: LossPlacement::PostActivation,
            scale_input: false,
            scale_sims: false,
            tau: 10.0,
        }
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` entries.
pub(crate) fn uniform_fan_in<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
}

/// `C x P x D` bank of i.i.d. Gaussian rows projected onto the unit sphere.
pub fn random_prototypes<T: Scalar>(
    classes: usize,
    per_class: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    if classes < 2 {
        return Err(HffError::config(format!("need at least 2 classes, got {classes}")));
    }
    if per_class == 0 || dim == 0 {
        return Err(HffError::config("prototype count and dimension must be positive"));
    }
    let mut protos = Tensor::from_fn(&[classes, per_class, dim], |_| T::from_f64(StandardNormal.sample(rng)));
    for row in protos.data_mut().chunks_mut(dim) {
        normalize_in_place(row);
    }
    Ok(protos)
}

/// Normalizes each row of `x` viewed as `dim(0) x rest`, returning the lengths.
pub(crate) fn normalize_rows<T: Scalar>(x: &mut Tensor<T>) -> Vec<T> {
    let w = x.row_len().max(1);
    x.data_mut().chunks_mut(w).map(normalize_in_place).collect()
}

/// Largest deviation of any prototype row norm from 1.
pub fn max_unit_norm_error<T: Scalar>(protos: &Tensor<T>) -> f64 {
    let d = *protos.shape().last().unwrap_or(&1);
    protos.data().chunks(d.max(1)).map(|r| (crate::tensor::l2_norm(r).as_f64() - 1.0).abs()).fold(0.0, f64::max)
}
