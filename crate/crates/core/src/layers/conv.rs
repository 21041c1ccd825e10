use rand_chacha::ChaCha8Rng;

use super::{class_scores, max_unit_norm_error, normalize_rows, random_prototypes, uniform_fan_in};
use super::{ClassScores, HeadOptions, LossPlacement, ProtoSet};
use crate::error::{HffError, Result};
use crate::optim::ProtoEma;
use crate::tensor::{conv2d_cols, conv_out_extent, gemm, im2col, max_pool2x2_into, MatRef, Scalar, Tensor};

/// Convolutional HFF layer. The score path is
/// `activation map -> optional 1x1 aux conv -> GAP -> unit sphere -> prototypes`;
/// only the (pooled) activation map feeds forward.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    /// `Cout x Cin x kh x kw`.
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    /// `Caux x Cout x 1 x 1`.
    pub aux: Option<Tensor<T>>,
    pub protos: Tensor<T>,
    pub ema: ProtoEma<T>,
    pub opts: HeadOptions,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct ConvForward<T> {
    /// `B x Cout x H' x W'` pre-activation map.
    pub f_map: Tensor<T>,
    /// `sigma(f_map)`.
    pub h_map: Tensor<T>,
    /// `B x Cout` spatial mean of the loss-side map (`h` post, `f` pre).
    pub pooled: Tensor<T>,
    /// `B x Dproto` normalized score feature.
    pub z_unit: Tensor<T>,
    pub z_len: Vec<T>,
    pub scores: ClassScores<T>,
}

impl<T: Scalar> ConvForward<T> {
    /// Input for the next layer: 2x2 max pooled activation map (skipped when
    /// the map is already below 2x2), normalized per sample unless
    /// `scale_input` is set.
    pub fn next_input(&self, scale_input: bool) -> Result<Tensor<T>> {
        let s = self.h_map.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = if h >= 2 && w >= 2 {
            let (oh, ow) = (h / 2, w / 2);
            let mut out = Tensor::zeros(&[b, c, oh, ow]);
            let step = c * oh * ow;
            for (i, dst) in out.data_mut().chunks_mut(step.max(1)).enumerate() {
                max_pool2x2_into(self.h_map.row(i), (c, h, w), dst);
            }
            out
        } else {
            self.h_map.clone()
        };
        if !scale_input {
            normalize_rows(&mut out);
        }
        Ok(out)
    }
}

impl<T: Scalar> ConvLayer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        pad: usize,
        aux_channels: Option<usize>,
        classes: usize,
        per_class: usize,
        opts: HeadOptions,
        ema_decay: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        opts.validate()?;
        if in_channels == 0 || out_channels == 0 || kernel_size == 0 {
            return Err(HffError::config("conv channels and kernel size must be positive"));
        }
        let fan_in = in_channels * kernel_size * kernel_size;
        let kernel = uniform_fan_in(&[out_channels, in_channels, kernel_size, kernel_size], fan_in, rng);
        let bias = uniform_fan_in(&[out_channels], fan_in, rng);
        let aux = match aux_channels {
            Some(0) | None => None,
            Some(a) => Some(uniform_fan_in(&[a, out_channels, 1, 1], out_channels, rng)),
        };
        let dim = aux.as_ref().map_or(out_channels, |a| a.dim(0));
        let protos = random_prototypes(classes, per_class, dim, rng)?;
        Self::from_parts(kernel, bias, aux, protos, opts, stride, pad, ema_decay)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        kernel: Tensor<T>,
        bias: Tensor<T>,
        aux: Option<Tensor<T>>,
        protos: Tensor<T>,
        opts: HeadOptions,
        stride: usize,
        pad: usize,
        ema_decay: f64,
    ) -> Result<Self> {
        let ema = ProtoEma::new(protos.clone(), ema_decay)?;
        let layer = ConvLayer { kernel, bias, aux, protos, ema, opts, stride, pad };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        self.opts.validate()?;
        if self.kernel.rank() != 4 {
            return Err(HffError::dim(format!("conv kernel must be rank 4, got {:?}", self.kernel.shape())));
        }
        if self.stride == 0 {
            return Err(HffError::config("conv stride must be positive"));
        }
        let cout = self.out_channels();
        if self.bias.shape() != [cout] {
            return Err(HffError::dim(format!("bias {:?} does not match {cout} output channels", self.bias.shape())));
        }
        if let Some(aux) = &self.aux {
            if aux.rank() != 4 || aux.dim(2) != 1 || aux.dim(3) != 1 {
                return Err(HffError::dim(format!("aux kernel must be Caux x Cout x 1 x 1, got {:?}", aux.shape())));
            }
            if aux.dim(1) != cout {
                return Err(HffError::dim(format!(
                    "aux kernel {:?} expects {} channels, conv produces {cout}",
                    aux.shape(),
                    aux.dim(1)
                )));
            }
        }
        if self.protos.rank() != 3 || self.protos.dim(2) != self.proto_dim() {
            return Err(HffError::dim(format!(
                "prototypes {:?} must be C x P x {}",
                self.protos.shape(),
                self.proto_dim()
            )));
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

    pub fn in_channels(&self) -> usize {
        self.kernel.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dim(0)
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel.dim(2), self.kernel.dim(3))
    }

    pub fn proto_dim(&self) -> usize {
        self.aux.as_ref().map_or(self.out_channels(), |a| a.dim(0))
    }

    pub fn classes(&self) -> usize {
        self.protos.dim(0)
    }

    pub fn protos_for(&self, set: ProtoSet) -> &Tensor<T> {
        match set {
            ProtoSet::Raw => &self.protos,
            ProtoSet::Ema => &self.ema.shadow,
        }
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_size();
        Ok((conv_out_extent(h, kh, self.stride, self.pad)?, conv_out_extent(w, kw, self.stride, self.pad)?))
    }

    pub fn forward(&self, x: &Tensor<T>, set: ProtoSet) -> Result<ConvForward<T>> {
        if x.rank() != 4 || x.dim(1) != self.in_channels() {
            return Err(HffError::dim(format!(
                "conv layer expects B x {} x H x W input, got {:?}",
                self.in_channels(),
                x.shape()
            )));
        }
        let (b, cin, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (oh, ow) = self.output_extent(h, w)?;
        let cout = self.out_channels();
        let plane = oh * ow;
        let mut f_map = Tensor::zeros(&[b, cout, oh, ow]);
        let mut cols = Vec::new();
        for i in 0..b {
            im2col(x.row(i), (cin, h, w), self.kernel_size(), self.stride, self.pad, &mut cols)?;
            conv2d_cols(&self.kernel, &self.bias, &cols, plane, f_map.row_mut(i));
        }
        let f_map = f_map.check_finite("conv2d")?;
        let act = self.opts.activation;
        let h_map = f_map.map(|v| act.apply(v));
        let loss_map = match self.opts.placement {
            LossPlacement::PostActivation => &h_map,
            LossPlacement::PreActivation => &f_map,
        };
        let inv = T::one() / T::from_f64(plane as f64);
        let pooled = Tensor::new(
            &[b, cout],
            loss_map.data().chunks(plane).map(|ch| ch.iter().copied().sum::<T>() * inv).collect(),
        )?;
        // The aux 1x1 conv has no bias or nonlinearity, so it commutes with
        // the spatial mean: GAP(A * h) = A * GAP(h).
        let mut z = match &self.aux {
            Some(aux) => {
                let caux = aux.dim(0);
                let mut z = Tensor::zeros(&[b, caux]);
                gemm(
                    T::one(),
                    MatRef::new(pooled.data(), b, cout),
                    MatRef::new(aux.data(), caux, cout).t(),
                    T::zero(),
                    z.data_mut(),
                );
                z
            }
            None => pooled.clone(),
        };
        let z_len = normalize_rows(&mut z);
        let scores = class_scores(self.protos_for(set), &z, self.opts.tau, self.opts.scale_sims, &z_len)?;
        Ok(ConvForward { f_map, h_map, pooled, z_unit: z, z_len, scores })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> HeadOptions {
        HeadOptions::default()
    }

    fn protos(dim: usize) -> Tensor<f64> {
        let mut p = Tensor::zeros(&[2, 1, dim]);
        p.data_mut()[0] = 1.0;
        p.data_mut()[dim + dim - 1] = 1.0;
        p
    }

    #[test]
    fn constant_input_gives_uniform_direction() {
        let kernel = Tensor::full(&[3, 1, 1, 1], 1.0);
        let layer = ConvLayer::from_parts(kernel, Tensor::zeros(&[3]), None, protos(3), opts(), 1, 0, 0.99).unwrap();
        let x = Tensor::full(&[2, 1, 4, 4], 0.5);
        let fwd = layer.forward(&x, ProtoSet::Raw).unwrap();
        let u = 1.0 / 3f64.sqrt();
        for v in fwd.z_unit.data() {
            assert!((v - u).abs() < 1e-12);
        }
    }

    #[test]
    fn aux_channel_mismatch() {
        let kernel = Tensor::full(&[3, 1, 1, 1], 1.0);
        let aux = Tensor::zeros(&[2, 4, 1, 1]);
        let r = ConvLayer::from_parts(kernel, Tensor::zeros(&[3]), Some(aux), protos(2), opts(), 1, 0, 0.99);
        assert!(matches!(r, Err(HffError::Dimension(_))));
    }

    #[test]
    fn aux_must_be_pointwise() {
        let kernel = Tensor::full(&[3, 1, 1, 1], 1.0);
        let aux = Tensor::zeros(&[2, 3, 3, 3]);
        let r = ConvLayer::from_parts(kernel, Tensor::zeros(&[3]), Some(aux), protos(2), opts(), 1, 0, 0.99);
        assert!(r.is_err());
    }

    #[test]
    fn next_input_pools_and_normalizes() {
        let kernel = Tensor::full(&[1, 1, 1, 1], 1.0);
        let layer = ConvLayer::from_parts(kernel, Tensor::zeros(&[1]), None, protos(1), opts(), 1, 0, 0.99);
        // One output channel cannot host two distinct unit prototypes of dim 1
        // that differ, but the layer is still valid.
        let layer = layer.unwrap();
        let x = Tensor::new(&[1, 1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let fwd = layer.forward(&x, ProtoSet::Raw).unwrap();
        let raw = fwd.next_input(true).unwrap();
        assert_eq!(raw.shape(), &[1, 1, 1, 2]);
        assert_eq!(raw.data(), &[6.0, 8.0]);
        let unit = fwd.next_input(false).unwrap();
        assert!((unit.data()[0] - 0.6).abs() < 1e-15);
    }
}
