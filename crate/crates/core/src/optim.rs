//! Adam updates and the unit-sphere prototype step with its EMA shadow.

use crate::error::{HffError, Result};
use crate::tensor::{normalize_in_place, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub t: u64,
    /// First and second moments, one pair per parameter group.
    pub moments: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state with zero moments shaped like `params`.
    pub fn new(lr: f64, shapes: &[&[usize]]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: shapes.iter().map(|s| (Tensor::zeros(s), Tensor::zeros(s))).collect(),
        }
    }

    /// One bias-corrected Adam step over all groups. Nothing is modified if
    /// any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], names: &[&str]) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != params.len() {
            return Err(HffError::Usage(format!(
                "adam state tracks {} groups, got {} params and {} grads",
                self.moments.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).copied().unwrap_or("?");
            if p.shape() != g.shape() || p.shape() != self.moments[i].0.shape() {
                return Err(HffError::dim(format!("parameter `{name}` {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            if !g.is_finite() {
                return Err(HffError::NonFinite(format!("gradient of parameter group `{name}`")));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let bc1 = T::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        let one = T::one();
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of a prototype bank, kept on the unit sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoEma<T> {
    pub shadow: Tensor<T>,
    pub decay: f64,
}

impl<T: Scalar> ProtoEma<T> {
    pub fn new(shadow: Tensor<T>, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(HffError::config(format!("EMA decay must lie in [0, 1), got {decay}")));
        }
        Ok(ProtoEma { shadow, decay })
    }

    /// `shadow <- decay * shadow + (1 - decay) * protos`, then every row is
    /// projected back onto the sphere.
    pub fn update(&mut self, protos: &Tensor<T>) -> Result<()> {
        let d = T::from_f64(self.decay);
        let e = T::one() - d;
        for (s, &p) in self.shadow.data_mut().iter_mut().zip(protos.data()) {
            *s = d * *s + e * p;
        }
        renormalize_rows(&mut self.shadow, "EMA prototype")
    }
}

fn renormalize_rows<T: Scalar>(protos: &mut Tensor<T>, what: &str) -> Result<()> {
    let dim = *protos.shape().last().unwrap_or(&1);
    for (i, row) in protos.data_mut().chunks_mut(dim.max(1)).enumerate() {
        let len = normalize_in_place(row);
        if !(len.as_f64() > 1e-12) || !len.is_finite() {
            return Err(HffError::Divergence(format!("{what} row {i} collapsed to norm {len}")));
        }
    }
    Ok(())
}

/// Adam on the raw prototypes, projection of every row onto the unit sphere,
/// then the EMA shadow update.
pub fn proto_step<T: Scalar>(
    protos: &mut Tensor<T>,
    grad: &Tensor<T>,
    adam: &mut AdamState<T>,
    ema: &mut ProtoEma<T>,
) -> Result<()> {
    adam.step(&mut [protos], &[grad], &["protos"])?;
    renormalize_rows(protos, "prototype")?;
    ema.update(protos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::max_unit_norm_error;

    fn unit_bank() -> Tensor<f64> {
        let mut p = Tensor::new(&[2, 1, 3], vec![1.0, 2.0, 2.0, 0.0, -3.0, 4.0]).unwrap();
        renormalize_rows(&mut p, "test").unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = w.clone();
        let mut adam = AdamState::new(0.1, &[&[3]]);
        adam.step(&mut [&mut w], &[&Tensor::zeros(&[3])], &["w"]).unwrap();
        assert_eq!(w, before);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut w = Tensor::<f64>::zeros(&[3]);
        let g = Tensor::<f64>::new(&[3], vec![2.0, -0.5, 1e-3]).unwrap();
        let mut adam = AdamState::new(0.01, &[&[3]]);
        adam.step(&mut [&mut w], &[&g], &["w"]).unwrap();
        for (&wi, &gi) in w.data().iter().zip(g.data()) {
            assert!((wi + 0.01 * gi.signum()).abs() < 1e-7, "{wi}");
        }
    }

    #[test]
    fn nan_gradient_names_group() {
        let mut w = Tensor::<f64>::zeros(&[2]);
        let g = Tensor::new(&[2], vec![f64::NAN, 0.0]).unwrap();
        let mut adam = AdamState::new(0.01, &[&[2]]);
        let err = adam.step(&mut [&mut w], &[&g], &["layer0.bias"]).unwrap_err();
        assert!(err.to_string().contains("layer0.bias"));
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn proto_step_keeps_unit_rows() {
        let mut protos = unit_bank();
        let mut ema = ProtoEma::new(unit_bank(), 0.99).unwrap();
        let mut adam = AdamState::new(0.05, &[protos.shape()]);
        let g = Tensor::from_fn(protos.shape(), |i| (i as f64 - 2.5) * 0.3);
        for _ in 0..25 {
            proto_step(&mut protos, &g, &mut adam, &mut ema).unwrap();
            assert!(max_unit_norm_error(&protos) < 1e-6);
            assert!(max_unit_norm_error(&ema.shadow) < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_pulls_shadow_toward_protos() {
        let mut protos = unit_bank();
        let mut shadow = protos.clone();
        shadow.data_mut().reverse();
        renormalize_rows(&mut shadow, "test").unwrap();
        let mut ema = ProtoEma::new(shadow, 0.9).unwrap();
        let mut adam = AdamState::new(0.05, &[protos.shape()]);
        let before = protos.clone();
        let gap0 = ema.shadow.max_abs_diff(&protos);
        proto_step(&mut protos, &Tensor::zeros(before.shape()), &mut adam, &mut ema).unwrap();
        assert_eq!(protos, before);
        assert!(ema.shadow.max_abs_diff(&protos) < gap0);
        assert!(max_unit_norm_error(&ema.shadow) < 1e-6);
    }

    #[test]
    fn zero_decay_copies_protos() {
        let mut protos = unit_bank();
        let mut ema = ProtoEma::new(Tensor::full(protos.shape(), 0.5), 0.0).unwrap();
        let mut adam = AdamState::new(0.05, &[protos.shape()]);
        let g = Tensor::from_fn(protos.shape(), |i| i as f64 * 0.1);
        proto_step(&mut protos, &g, &mut adam, &mut ema).unwrap();
        let mut expected = protos.clone();
        renormalize_rows(&mut expected, "test").unwrap();
        assert_eq!(ema.shadow, expected);
    }

    #[test]
    fn collapsed_row_aborts() {
        let mut p = Tensor::new(&[1, 1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(renormalize_rows(&mut p, "prototype"), Err(HffError::Divergence(_))));
        assert!(ProtoEma::new(p, 1.0).is_err());
    }
}
