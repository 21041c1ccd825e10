//! Closed-form backward passes. Each layer is trained only by its own loss, so
//! nothing here propagates a gradient into the layer's input.

use super::losses::{cross_entropy_with_grad, ff_loss_with_grad, smooth_margin_with_grad};
use super::LossKind;
use crate::error::{HffError, Result};
use crate::layers::{
    ClassScores, ConvForward, ConvLayer, DenseForward, DenseLayer, FfForward, FfLayer, HeadOptions, LossPlacement,
    ProtoSet,
};
use crate::tensor::{gemm, im2col, MatRef, Scalar, Tensor};

/// Batch-mean loss of one layer and its parameter gradients.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub loss: f64,
    pub d_weight: Tensor<T>,
    pub d_bias: Tensor<T>,
    /// Absent for the FF baseline, which has no prototypes.
    pub d_protos: Option<Tensor<T>>,
    pub d_aux: Option<Tensor<T>>,
    /// Gradient at the feature before length normalization: `f` or `h` for a
    /// dense layer, the pooled (and aux-projected) vector for a conv layer,
    /// `h` for the FF baseline.
    pub d_feat: Tensor<T>,
    /// Gradient at the affine output `f` (the conv map for conv layers).
    pub d_f: Tensor<T>,
}

/// Mean head loss over a batch of score rows.
pub fn head_loss<T: Scalar>(scores: &ClassScores<T>, labels: &[usize], kind: LossKind, tau: f64) -> Result<f64> {
    let b = scores.scores.dim(0);
    check_labels(labels, b, scores.scores.dim(1))?;
    let tau = T::from_f64(tau);
    let mut grad = vec![T::zero(); scores.scores.dim(1)];
    let mut total = 0.0;
    for (row, &y) in scores.scores.rows().zip(labels) {
        total += score_loss(row, y, kind, tau, &mut grad)?.as_f64();
    }
    Ok(total / b.max(1) as f64)
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(HffError::dim(format!("{} labels for a batch of {batch}", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(HffError::config(format!("label {y} out of range for {classes} classes")));
    }
    Ok(())
}

fn score_loss<T: Scalar>(row: &[T], y: usize, kind: LossKind, tau: T, grad: &mut [T]) -> Result<T> {
    match kind {
        LossKind::SmoothMargin => Ok(smooth_margin_with_grad(row, y, tau, grad)),
        LossKind::CrossEntropy => Ok(cross_entropy_with_grad(row, y, grad)),
        LossKind::Ff => Err(HffError::config("the ff loss applies to FF layers only")),
    }
}

struct HeadGrad<T> {
    loss: f64,
    d_feat: Tensor<T>,
    d_protos: Tensor<T>,
}

/// Backward through LSE pooling, similarities and length normalization.
fn head_backward<T: Scalar>(
    protos: &Tensor<T>,
    feat_unit: &Tensor<T>,
    feat_len: &[T],
    scores: &ClassScores<T>,
    labels: &[usize],
    kind: LossKind,
    opts: &HeadOptions,
) -> Result<HeadGrad<T>> {
    let (c, p, d) = (protos.dim(0), protos.dim(1), protos.dim(2));
    let b = feat_unit.dim(0);
    check_labels(labels, b, c)?;
    let tau = T::from_f64(opts.tau);
    let inv_b = T::one() / T::from_f64(b.max(1) as f64);
    let cp = c * p;

    // delta[i, (c,p)] = dL/dscore_c * softmax weight of s_{c,p}, times the
    // similarity scale.
    let mut delta = vec![T::zero(); b * cp];
    let mut d_len = vec![T::zero(); b];
    let mut dg = vec![T::zero(); c];
    let mut total = 0.0;
    for i in 0..b {
        total += score_loss(scores.scores.row(i), labels[i], kind, tau, &mut dg)?.as_f64();
        let len = feat_len[i];
        let alpha = if opts.scale_sims { len } else { T::one() };
        let sims = scores.sims.row(i);
        let g = scores.scores.row(i);
        let drow = &mut delta[i * cp..(i + 1) * cp];
        for ci in 0..c {
            let upstream = dg[ci] * inv_b;
            for pi in 0..p {
                let k = ci * p + pi;
                let w = if p == 1 { T::one() } else { ((sims[k] - g[ci]) * tau).exp() };
                let dk = upstream * w;
                if opts.scale_sims && len > T::zero() {
                    d_len[i] = d_len[i] + dk * sims[k] / len;
                }
                drow[k] = dk * alpha;
            }
        }
    }

    let mut du = Tensor::zeros(&[b, d]);
    gemm(T::one(), MatRef::new(&delta, b, cp), MatRef::new(protos.data(), cp, d), T::zero(), du.data_mut());
    let mut d_protos = Tensor::zeros(protos.shape());
    gemm(T::one(), MatRef::new(&delta, b, cp).t(), MatRef::new(feat_unit.data(), b, d), T::zero(), d_protos.data_mut());

    // d feat = (du - u (u . du)) / |feat| + u * dL/d|feat|
    let mut d_feat = du;
    for i in 0..b {
        let len = feat_len[i];
        let u = feat_unit.row(i);
        let row = d_feat.row_mut(i);
        if !(len > T::zero()) {
            row.fill(T::zero());
            continue;
        }
        let radial: T = u.iter().zip(row.iter()).map(|(&a, &g)| a * g).sum();
        for (g, &a) in row.iter_mut().zip(u) {
            *g = (*g - a * radial) / len + a * d_len[i];
        }
    }
    Ok(HeadGrad { loss: total / b.max(1) as f64, d_feat, d_protos })
}

/// Column sums of a `rows x cols` matrix.
fn column_sums<T: Scalar>(m: &Tensor<T>, cols: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[cols]);
    for row in m.data().chunks(cols.max(1)) {
        out.data_mut().iter_mut().zip(row).for_each(|(o, &v)| *o = *o + v);
    }
    out
}

/// Gradients of a dense HFF layer's own loss. `fwd` must come from
/// `layer.forward(input, set)`.
pub fn dense_backward<T: Scalar>(
    layer: &DenseLayer<T>,
    input: &Tensor<T>,
    fwd: &DenseForward<T>,
    labels: &[usize],
    kind: LossKind,
    set: ProtoSet,
) -> Result<LossGrad<T>> {
    let (b, din, dout) = (input.dim(0), layer.in_dim(), layer.out_dim());
    if fwd.f.shape() != [b, dout] {
        return Err(HffError::dim("forward cache does not match the input batch"));
    }
    let head =
        head_backward(layer.protos_for(set), &fwd.feat_unit, &fwd.feat_len, &fwd.scores, labels, kind, &layer.opts)?;
    let d_f = match layer.opts.placement {
        LossPlacement::PreActivation => head.d_feat.clone(),
        LossPlacement::PostActivation => {
            let act = layer.opts.activation;
            let mut d = head.d_feat.clone();
            d.data_mut().iter_mut().zip(fwd.f.data()).for_each(|(g, &f)| *g = *g * act.derivative(f));
            d
        }
    };
    let mut d_weight = Tensor::zeros(&[dout, din]);
    gemm(
        T::one(),
        MatRef::new(d_f.data(), b, dout).t(),
        MatRef::new(input.data(), b, din),
        T::zero(),
        d_weight.data_mut(),
    );
    let d_bias = column_sums(&d_f, dout);
    Ok(LossGrad {
        loss: head.loss,
        d_weight,
        d_bias,
        d_protos: Some(head.d_protos),
        d_aux: None,
        d_feat: head.d_feat,
        d_f,
    })
}

/// Gradients of a conv HFF layer's own loss. `fwd` must come from
/// `layer.forward(x, set)`.
pub fn conv_backward<T: Scalar>(
    layer: &ConvLayer<T>,
    x: &Tensor<T>,
    fwd: &ConvForward<T>,
    labels: &[usize],
    kind: LossKind,
    set: ProtoSet,
) -> Result<LossGrad<T>> {
    let (b, cin, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let cout = layer.out_channels();
    let (oh, ow) = (fwd.f_map.dim(2), fwd.f_map.dim(3));
    let plane = oh * ow;
    if fwd.f_map.dim(0) != b {
        return Err(HffError::dim("forward cache does not match the input batch"));
    }
    let head = head_backward(layer.protos_for(set), &fwd.z_unit, &fwd.z_len, &fwd.scores, labels, kind, &layer.opts)?;

    let (d_pooled, d_aux) = match &layer.aux {
        Some(aux) => {
            let caux = aux.dim(0);
            let mut d_aux = Tensor::zeros(aux.shape());
            gemm(
                T::one(),
                MatRef::new(head.d_feat.data(), b, caux).t(),
                MatRef::new(fwd.pooled.data(), b, cout),
                T::zero(),
                d_aux.data_mut(),
            );
            let mut d_pooled = Tensor::zeros(&[b, cout]);
            gemm(
                T::one(),
                MatRef::new(head.d_feat.data(), b, caux),
                MatRef::new(aux.data(), caux, cout),
                T::zero(),
                d_pooled.data_mut(),
            );
            (d_pooled, Some(d_aux))
        }
        None => (head.d_feat.clone(), None),
    };

    let inv_plane = T::one() / T::from_f64(plane as f64);
    let act = layer.opts.activation;
    let post = layer.opts.placement == LossPlacement::PostActivation;
    let mut d_f = Tensor::zeros(fwd.f_map.shape());
    for ((dst, src), &g) in d_f.data_mut().chunks_mut(plane).zip(fwd.f_map.data().chunks(plane)).zip(d_pooled.data()) {
        let g = g * inv_plane;
        for (d, &f) in dst.iter_mut().zip(src) {
            *d = if post { g * act.derivative(f) } else { g };
        }
    }

    let (kh, kw) = layer.kernel_size();
    let patch = cin * kh * kw;
    let mut d_kernel = Tensor::zeros(layer.kernel.shape());
    let mut cols = Vec::new();
    for i in 0..b {
        im2col(x.row(i), (cin, h, w), (kh, kw), layer.stride, layer.pad, &mut cols)?;
        gemm(
            T::one(),
            MatRef::new(d_f.row(i), cout, plane),
            MatRef::new(&cols, patch, plane).t(),
            T::one(),
            d_kernel.data_mut(),
        );
    }
    let mut d_bias = Tensor::zeros(&[cout]);
    for (k, ch) in d_f.data().chunks(plane).enumerate() {
        let o = &mut d_bias.data_mut()[k % cout];
        *o = *o + ch.iter().copied().sum::<T>();
    }
    Ok(LossGrad {
        loss: head.loss,
        d_weight: d_kernel,
        d_bias,
        d_protos: Some(head.d_protos),
        d_aux,
        d_feat: head.d_feat,
        d_f,
    })
}

/// Gradients of the FF pair loss averaged over `B` positive/negative pairs.
/// Rows of `d_f` and `d_feat` hold the positive batch first, then the negative.
pub fn ff_backward<T: Scalar>(
    layer: &FfLayer<T>,
    pos: &Tensor<T>,
    pos_fwd: &FfForward<T>,
    neg: &Tensor<T>,
    neg_fwd: &FfForward<T>,
) -> Result<LossGrad<T>> {
    let b = pos.dim(0);
    if neg.dim(0) != b || pos_fwd.goodness.len() != b || neg_fwd.goodness.len() != b {
        return Err(HffError::dim("FF loss needs equally sized positive and negative batches"));
    }
    let (din, dout) = (layer.in_dim(), layer.out_dim());
    let theta = T::from_f64(layer.theta);
    let inv_b = T::one() / T::from_f64(b.max(1) as f64);
    let two = T::from_f64(2.0);
    let act = layer.activation;
    let mut d_feat = Tensor::zeros(&[2 * b, dout]);
    let mut d_f = Tensor::zeros(&[2 * b, dout]);
    let mut total = 0.0;
    for i in 0..b {
        let (l, gp, gn) = ff_loss_with_grad(pos_fwd.goodness[i], neg_fwd.goodness[i], theta);
        total += l.as_f64();
        for (row, fwd, dg) in [(i, pos_fwd, gp), (b + i, neg_fwd, gn)] {
            let src = row % b;
            let hrow = fwd.h.row(src);
            let frow = fwd.f.row(src);
            let dh = d_feat.row_mut(row);
            for (g, &hv) in dh.iter_mut().zip(hrow) {
                *g = dg * inv_b * two * hv;
            }
            let dh = d_feat.row(row).to_vec();
            for ((g, &dv), &fv) in d_f.row_mut(row).iter_mut().zip(&dh).zip(frow) {
                *g = dv * act.derivative(fv);
            }
        }
    }
    let mut d_weight = Tensor::zeros(&[dout, din]);
    for (half, input) in [(0, pos), (1, neg)] {
        gemm(
            T::one(),
            MatRef::new(&d_f.data()[half * b * dout..(half + 1) * b * dout], b, dout).t(),
            MatRef::new(input.data(), b, din),
            T::one(),
            d_weight.data_mut(),
        );
    }
    let d_bias = column_sums(&d_f, dout);
    Ok(LossGrad { loss: total / b.max(1) as f64, d_weight, d_bias, d_protos: None, d_aux: None, d_feat, d_f })
}

/// Mean FF pair loss of a layer on positive and negative batches.
pub fn ff_pair_loss<T: Scalar>(pos_fwd: &FfForward<T>, neg_fwd: &FfForward<T>, theta: f64) -> f64 {
    let theta = T::from_f64(theta);
    let b = pos_fwd.goodness.len();
    let total: f64 =
        pos_fwd.goodness.iter().zip(&neg_fwd.goodness).map(|(&p, &n)| ff_loss_with_grad(p, n, theta).0.as_f64()).sum();
    total / b.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Activation;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn pre_placement_gradient_is_tangent() {
        let mut protos = unit(&[1.0, 0.5, -0.2]);
        protos.extend(unit(&[-0.3, 1.0, 0.4]));
        let protos = Tensor::new(&[2, 1, 3], protos).unwrap();
        let opts = HeadOptions {
            placement: LossPlacement::PreActivation,
            activation: Activation::Tanh,
            ..HeadOptions::default()
        };
        let weight = Tensor::from_fn(&[3, 2], |i| 0.3 * i as f64 - 0.7);
        let layer = DenseLayer::from_parts(weight, Tensor::full(&[3], 0.1), protos, opts, 0.9).unwrap();
        let x = Tensor::new(&[2, 2], vec![0.4, -1.0, 2.0, 0.3]).unwrap();
        let fwd = layer.forward(&x, ProtoSet::Raw).unwrap();
        let g = dense_backward(&layer, &x, &fwd, &[0, 1], LossKind::SmoothMargin, ProtoSet::Raw).unwrap();
        for (gr, fr) in g.d_f.rows().zip(fwd.f.rows()) {
            let dot: f64 = gr.iter().zip(fr).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-15, "{dot}");
        }
    }

    #[test]
    fn dead_relu_row_has_no_gradient() {
        let protos = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let layer =
            DenseLayer::from_parts(Tensor::identity(2), Tensor::zeros(&[2]), protos, HeadOptions::default(), 0.9)
                .unwrap();
        let x = Tensor::new(&[1, 2], vec![-1.0, -2.0]).unwrap();
        let fwd = layer.forward(&x, ProtoSet::Raw).unwrap();
        let g = dense_backward(&layer, &x, &fwd, &[1], LossKind::SmoothMargin, ProtoSet::Raw).unwrap();
        assert!(g.d_weight.data().iter().all(|&v| v == 0.0));
        assert!(g.d_bias.data().iter().all(|&v| v == 0.0));
        assert!((g.loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ff_loss_is_rejected_for_hff_heads() {
        let protos = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let layer =
            DenseLayer::from_parts(Tensor::identity(2), Tensor::zeros(&[2]), protos, HeadOptions::default(), 0.9)
                .unwrap();
        let x = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let fwd = layer.forward(&x, ProtoSet::Raw).unwrap();
        assert!(dense_backward(&layer, &x, &fwd, &[0], LossKind::Ff, ProtoSet::Raw).is_err());
        assert!(dense_backward(&layer, &x, &fwd, &[5], LossKind::SmoothMargin, ProtoSet::Raw).is_err());
    }
}
