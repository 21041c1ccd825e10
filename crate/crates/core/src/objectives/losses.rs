use std::fmt;
use std::str::FromStr;

use crate::error::{HffError, Result};
use crate::layers::lse;
use crate::tensor::Scalar;

/// Local objective a layer is trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// `softplus(-(g[y] - lse_tau(g[!y])))`.
    SmoothMargin,
    /// `-log softmax(g)[y]`.
    CrossEntropy,
    /// Baseline forward-forward goodness loss against a threshold.
    Ff,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::SmoothMargin => "smooth_margin",
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Ff => "ff",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = HffError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth_margin" | "sm" => Ok(LossKind::SmoothMargin),
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "ff" => Ok(LossKind::Ff),
            _ => Err(HffError::config(format!("loss `{s}`; expected smooth_margin|cross_entropy|ff"))),
        }
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn check_target(len: usize, y: usize) -> Result<()> {
    if len < 2 {
        return Err(HffError::config(format!("a local loss needs at least 2 classes, got {len}")));
    }
    if y >= len {
        return Err(HffError::config(format!("label {y} out of range for {len} classes")));
    }
    Ok(())
}

pub fn smooth_margin_loss<T: Scalar>(scores: &[T], y: usize, tau: f64) -> Result<T> {
    check_target(scores.len(), y)?;
    let mut grad = vec![T::zero(); scores.len()];
    Ok(smooth_margin_with_grad(scores, y, T::from_f64(tau), &mut grad))
}

pub fn cross_entropy_loss<T: Scalar>(scores: &[T], y: usize) -> Result<T> {
    check_target(scores.len(), y)?;
    let mut grad = vec![T::zero(); scores.len()];
    Ok(cross_entropy_with_grad(scores, y, &mut grad))
}

/// Loss and `dL/dscores` for the smooth margin objective.
pub(crate) fn smooth_margin_with_grad<T: Scalar>(scores: &[T], y: usize, tau: T, grad: &mut [T]) -> T {
    let negatives: Vec<T> = scores.iter().enumerate().filter(|&(k, _)| k != y).map(|(_, &s)| s).collect();
    let pooled = lse(&negatives, tau);
    let margin = scores[y] - pooled;
    let pull = sigmoid(-margin);
    for (k, (g, &s)) in grad.iter_mut().zip(scores).enumerate() {
        *g = if k == y { -pull } else { pull * ((s - pooled) * tau).exp() };
    }
    softplus(-margin)
}

pub(crate) fn cross_entropy_with_grad<T: Scalar>(scores: &[T], y: usize, grad: &mut [T]) -> T {
    let log_z = lse(scores, T::one());
    for (k, (g, &s)) in grad.iter_mut().zip(scores).enumerate() {
        let p = (s - log_z).exp();
        *g = if k == y { p - T::one() } else { p };
    }
    log_z - scores[y]
}

/// Forward-forward pair loss
/// `softplus(-(g_pos - theta)) + softplus(g_neg - theta)`.
pub fn ff_loss<T: Scalar>(g_pos: T, g_neg: T, theta: T) -> T {
    ff_loss_with_grad(g_pos, g_neg, theta).0
}

/// Loss together with `dL/dg_pos` (negative) and `dL/dg_neg` (positive).
pub fn ff_loss_with_grad<T: Scalar>(g_pos: T, g_neg: T, theta: T) -> (T, T, T) {
    let a = g_pos - theta;
    let b = g_neg - theta;
    (softplus(-a) + softplus(b), -sigmoid(-a), sigmoid(b))
}
