use rand_chacha::ChaCha8Rng;

use super::{uniform_fan_in, Activation};
use crate::error::{HffError, Result};
use crate::tensor::{matmul_nt, Scalar, Tensor};

/// Dense layer of the baseline forward-forward network, trained to push the
/// goodness `||h||^2` above `theta` for positive data and below it for
/// negative data.
#[derive(Clone, Debug, PartialEq)]
pub struct FfLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
    pub theta: f64,
}

#[derive(Clone, Debug)]
pub struct FfForward<T> {
    pub f: Tensor<T>,
    pub h: Tensor<T>,
    pub goodness: Vec<T>,
}

impl<T: Scalar> FfForward<T> {
    /// Length-normalized activity for the next layer.
    pub fn next_input(&self) -> Tensor<T> {
        let mut out = self.h.clone();
        super::normalize_rows(&mut out);
        out
    }
}

impl<T: Scalar> FfLayer<T> {
    pub fn new(in_dim: usize, out_dim: usize, theta: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(HffError::config("dense layer widths must be positive"));
        }
        Self::from_parts(
            uniform_fan_in(&[out_dim, in_dim], in_dim, rng),
            uniform_fan_in(&[out_dim], in_dim, rng),
            theta,
        )
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>, theta: f64) -> Result<Self> {
        if !theta.is_finite() {
            return Err(HffError::config("FF threshold must be finite"));
        }
        if weight.rank() != 2 || bias.shape() != [weight.dim(0)] {
            return Err(HffError::dim(format!("FF weight {:?} and bias {:?} disagree", weight.shape(), bias.shape())));
        }
        Ok(FfLayer { weight, bias, activation: Activation::Relu, theta })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<FfForward<T>> {
        if input.rank() != 2 || input.dim(1) != self.in_dim() {
            return Err(HffError::dim(format!(
                "FF layer expects B x {} input, got {:?}",
                self.in_dim(),
                input.shape()
            )));
        }
        let mut f = matmul_nt(input, &self.weight)?;
        for row in f.data_mut().chunks_mut(self.out_dim()) {
            row.iter_mut().zip(self.bias.data()).for_each(|(x, &b)| *x = *x + b);
        }
        let act = self.activation;
        let h = f.map(|x| act.apply(x));
        let goodness = ff_goodness(&h).into_data();
        Ok(FfForward { f, h, goodness })
    }
}

/// Sum of squared activities per row.
pub fn ff_goodness<T: Scalar>(h: &Tensor<T>) -> Tensor<T> {
    let rows = if h.rank() == 0 { 0 } else { h.dim(0) };
    let data = h.rows().take(rows).map(|r| r.iter().map(|&v| v * v).sum()).collect();
    Tensor::new(&[rows], data).expect("one goodness per row")
}

/// Overwrites the first `classes` entries of every row with
/// `intensity * onehot(labels[row])`.
pub fn embed_labels<T: Scalar>(x: &Tensor<T>, labels: &[usize], classes: usize, intensity: T) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(HffError::dim(format!("embed_label expects B x D input, got {:?}", x.shape())));
    }
    let width = x.row_len();
    if classes > width {
        return Err(HffError::dim(format!("cannot embed {classes} classes into {width}-wide inputs")));
    }
    if labels.len() != x.dim(0) {
        return Err(HffError::dim("one label per row required"));
    }
    let mut out = x.clone();
    for (row, &y) in out.data_mut().chunks_mut(width.max(1)).zip(labels) {
        if y >= classes {
            return Err(HffError::config(format!("label {y} out of range for {classes} classes")));
        }
        row[..classes].fill(T::zero());
        row[y] = intensity;
    }
    Ok(out)
}

/// Same label for every row.
pub fn embed_label<T: Scalar>(x: &Tensor<T>, label: usize, classes: usize, intensity: T) -> Result<Tensor<T>> {
    let labels = vec![label; if x.rank() == 0 { 0 } else { x.dim(0) }];
    embed_labels(x, &labels, classes, intensity)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn goodness_cases() {
        let h = Tensor::new(&[2, 2], vec![3.0f64, 4.0, 0.0, 0.0]).unwrap();
        assert_eq!(ff_goodness(&h).data(), &[25.0, 0.0]);
    }

    #[test]
    fn one_hot_overlay() {
        let x = Tensor::<f64>::full(&[1, 12], 0.5);
        let e = embed_label(&x, 3, 10, 1.0).unwrap();
        assert_eq!(&e.data()[..10], &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(&e.data()[10..], &[0.5, 0.5]);
    }

    #[test]
    fn label_zero_on_blank_image() {
        let e = embed_label(&Tensor::<f64>::zeros(&[1, 16]), 0, 10, 1.0).unwrap();
        assert_eq!(e.data()[0], 1.0);
        assert_eq!(e.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn too_many_classes() {
        assert!(matches!(embed_label(&Tensor::<f64>::zeros(&[1, 4]), 0, 10, 1.0), Err(HffError::Dimension(_))));
    }
}
