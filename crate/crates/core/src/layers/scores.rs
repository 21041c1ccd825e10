use crate::error::{HffError, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Per-class logits produced by one layer for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector<T>(Vec<T>);

impl<T: Scalar> ScoreVector<T> {
    pub fn new(scores: Vec<T>) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(HffError::NonFinite("class score".into()));
        }
        Ok(ScoreVector(scores))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest score; the first one wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Temperature LogSumExp `(1/tau) * ln sum_i exp(tau * v_i)`, shifted by the
/// maximum so large `tau * v` cannot overflow.
pub fn lse<T: Scalar>(values: &[T], tau: T) -> T {
    let m = values.iter().copied().fold(T::neg_infinity(), T::max);
    if values.len() == 1 || !m.is_finite() {
        return m;
    }
    let sum: T = values.iter().map(|&v| ((v - m) * tau).exp()).sum();
    m + sum.ln() / tau
}

/// Prototype similarities and the pooled class scores for a batch.
#[derive(Clone, Debug)]
pub struct ClassScores<T> {
    /// `B x C x P` similarities `s_{c,p}`.
    pub sims: Tensor<T>,
    /// `B x C` scores.
    pub scores: Tensor<T>,
}

impl<T: Scalar> ClassScores<T> {
    pub fn row(&self, i: usize) -> ScoreVector<T> {
        ScoreVector(self.scores.row(i).to_vec())
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.scores.rows().map(argmax).collect()
    }
}

/// Scores every row of `feat_unit[B x D]` against `protos[C x P x D]`.
///
/// `s_{c,p} = feat_unit . v_{c,p}`, multiplied by `feat_len` when
/// `scale_sims` is set, and `score[c] = lse_tau(s_{c,.})`.
pub fn class_scores<T: Scalar>(
    protos: &Tensor<T>,
    feat_unit: &Tensor<T>,
    tau: f64,
    scale_sims: bool,
    feat_len: &[T],
) -> Result<ClassScores<T>> {
    if !(tau > 0.0) {
        return Err(HffError::config(format!("tau must be positive, got {tau}")));
    }
    if protos.rank() != 3 || feat_unit.rank() != 2 {
        return Err(HffError::dim(format!(
            "class_scores expects C x P x D prototypes and B x D features, got {:?} and {:?}",
            protos.shape(),
            feat_unit.shape()
        )));
    }
    let (c, p, d) = (protos.dim(0), protos.dim(1), protos.dim(2));
    let b = feat_unit.dim(0);
    if feat_unit.dim(1) != d {
        return Err(HffError::dim(format!("feature width {} does not match prototype width {d}", feat_unit.dim(1))));
    }
    if feat_len.len() != b {
        return Err(HffError::dim("feature length vector does not match batch"));
    }
    let mut sims = Tensor::zeros(&[b, c, p]);
    gemm(
        T::one(),
        MatRef::new(feat_unit.data(), b, d),
        MatRef::new(protos.data(), c * p, d).t(),
        T::zero(),
        sims.data_mut(),
    );
    if scale_sims {
        for (row, &len) in sims.data_mut().chunks_mut(c * p).zip(feat_len) {
            row.iter_mut().for_each(|s| *s = *s * len);
        }
    }
    let tau_t = T::from_f64(tau);
    let scores = Tensor::new(&[b, c], sims.data().chunks(p).map(|s| lse(s, tau_t)).collect())?;
    let scores = scores.check_finite("class scores")?;
    Ok(ClassScores { sims, scores })
}
