//! Central finite-difference verification of the analytic backward passes.

use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::backward::{conv_backward, dense_backward, ff_backward, ff_pair_loss, head_loss};
use super::losses::{cross_entropy_with_grad, ff_loss_with_grad, smooth_margin_with_grad};
use super::LossKind;
use crate::error::Result;
use crate::layers::{
    random_prototypes, Activation, ClassScores, ConvLayer, DenseLayer, FfLayer, HeadOptions, LossPlacement, ProtoSet,
};
use crate::tensor::Tensor;

/// Step used for every central difference.
pub const FD_EPSILON: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// A scalar loss over named `f64` parameter groups with an analytic gradient.
pub trait GradCheckable {
    fn group_names(&self) -> Vec<&'static str>;
    fn param_mut(&mut self, group: usize) -> &mut Tensor<f64>;
    fn loss(&self) -> Result<f64>;
    /// One gradient per group, in `group_names` order.
    fn gradients(&self) -> Result<Vec<Tensor<f64>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    /// Folds `other` in, keeping the worst error per group name.
    pub fn merge(&mut self, other: GradCheckReport) {
        for g in other.groups {
            match self.groups.iter_mut().find(|s| s.name == g.name) {
                Some(s) => {
                    if g.max_rel_err > s.max_rel_err {
                        s.max_rel_err = g.max_rel_err;
                        s.worst = g.worst;
                    }
                    s.passed &= g.passed;
                }
                None => self.groups.push(g),
            }
        }
    }

    /// `group name, max_rel_err, pass|fail` per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let verdict = if g.passed { "pass" } else { "fail" };
            let _ = writeln!(out, "{}, {:.3e}, {verdict}", g.name, g.max_rel_err);
        }
        out
    }
}

/// Compares every analytic gradient coordinate with a central difference.
pub fn grad_check(subject: &mut dyn GradCheckable, tolerance: f64) -> Result<GradCheckReport> {
    let analytic = subject.gradients()?;
    let names = subject.group_names();
    let mut report = GradCheckReport::default();
    for (gi, (name, grad)) in names.iter().zip(&analytic).enumerate() {
        let mut worst = (0.0f64, 0usize);
        for k in 0..grad.len() {
            let orig = subject.param_mut(gi).data()[k];
            subject.param_mut(gi).data_mut()[k] = orig + FD_EPSILON;
            let up = subject.loss();
            subject.param_mut(gi).data_mut()[k] = orig - FD_EPSILON;
            let down = subject.loss();
            subject.param_mut(gi).data_mut()[k] = orig;
            let numeric = (up? - down?) / (2.0 * FD_EPSILON);
            let err = relative_error(grad.data()[k], numeric);
            if err > worst.0 || err.is_nan() {
                worst = (if err.is_nan() { f64::INFINITY } else { err }, k);
            }
        }
        report.groups.push(GroupReport {
            name: name.to_string(),
            max_rel_err: worst.0,
            worst: worst.1,
            passed: worst.0 <= tolerance,
        });
    }
    Ok(report)
}

/// Wraps a subject and scales one analytic coordinate, to confirm the
/// harness notices a wrong gradient.
pub struct Corrupted<S> {
    pub inner: S,
    pub group: usize,
    pub index: usize,
    pub factor: f64,
}

impl<S: GradCheckable> GradCheckable for Corrupted<S> {
    fn group_names(&self) -> Vec<&'static str> {
        self.inner.group_names()
    }

    fn param_mut(&mut self, group: usize) -> &mut Tensor<f64> {
        self.inner.param_mut(group)
    }

    fn loss(&self) -> Result<f64> {
        self.inner.loss()
    }

    fn gradients(&self) -> Result<Vec<Tensor<f64>>> {
        let mut g = self.inner.gradients()?;
        let t = &mut g[self.group];
        let k = self.index % t.len();
        t.data_mut()[k] *= self.factor;
        Ok(g)
    }
}

/// Dense HFF layer, a fixed batch and labels.
#[derive(Clone, Debug)]
pub struct DenseProblem {
    pub layer: DenseLayer<f64>,
    pub input: Tensor<f64>,
    pub labels: Vec<usize>,
    pub kind: LossKind,
}

impl GradCheckable for DenseProblem {
    fn group_names(&self) -> Vec<&'static str> {
        vec!["dense.weight", "dense.bias", "dense.protos"]
    }

    fn param_mut(&mut self, group: usize) -> &mut Tensor<f64> {
        match group {
            0 => &mut self.layer.weight,
            1 => &mut self.layer.bias,
            _ => &mut self.layer.protos,
        }
    }

    fn loss(&self) -> Result<f64> {
        let fwd = self.layer.forward(&self.input, ProtoSet::Raw)?;
        head_loss(&fwd.scores, &self.labels, self.kind, self.layer.opts.tau)
    }

    fn gradients(&self) -> Result<Vec<Tensor<f64>>> {
        let fwd = self.layer.forward(&self.input, ProtoSet::Raw)?;
        let g = dense_backward(&self.layer, &self.input, &fwd, &self.labels, self.kind, ProtoSet::Raw)?;
        Ok(vec![g.d_weight, g.d_bias, g.d_protos.expect("dense layers have prototypes")])
    }
}

/// Conv HFF layer, a fixed batch and labels.
#[derive(Clone, Debug)]
pub struct ConvProblem {
    pub layer: ConvLayer<f64>,
    pub input: Tensor<f64>,
    pub labels: Vec<usize>,
    pub kind: LossKind,
}

impl GradCheckable for ConvProblem {
    fn group_names(&self) -> Vec<&'static str> {
        let mut names = vec!["conv.kernel", "conv.bias", "conv.protos"];
        if self.layer.aux.is_some() {
            names.push("conv.aux");
        }
        names
    }

    fn param_mut(&mut self, group: usize) -> &mut Tensor<f64> {
        match group {
            0 => &mut self.layer.kernel,
            1 => &mut self.layer.bias,
            2 => &mut self.layer.protos,
            _ => self.layer.aux.as_mut().expect("aux group exists"),
        }
    }

    fn loss(&self) -> Result<f64> {
        let fwd = self.layer.forward(&self.input, ProtoSet::Raw)?;
        head_loss(&fwd.scores, &self.labels, self.kind, self.layer.opts.tau)
    }

    fn gradients(&self) -> Result<Vec<Tensor<f64>>> {
        let fwd = self.layer.forward(&self.input, ProtoSet::Raw)?;
        let g = conv_backward(&self.layer, &self.input, &fwd, &self.labels, self.kind, ProtoSet::Raw)?;
        let mut out = vec![g.d_weight, g.d_bias, g.d_protos.expect("conv layers have prototypes")];
        out.extend(g.d_aux);
        Ok(out)
    }
}

/// FF layer with a positive and a negative batch.
#[derive(Clone, Debug)]
pub struct FfProblem {
    pub layer: FfLayer<f64>,
    pub pos: Tensor<f64>,
    pub neg: Tensor<f64>,
}

impl GradCheckable for FfProblem {
    fn group_names(&self) -> Vec<&'static str> {
        vec!["ff.weight", "ff.bias"]
    }

    fn param_mut(&mut self, group: usize) -> &mut Tensor<f64> {
        match group {
            0 => &mut self.layer.weight,
            _ => &mut self.layer.bias,
        }
    }

    fn loss(&self) -> Result<f64> {
        let p = self.layer.forward(&self.pos)?;
        let n = self.layer.forward(&self.neg)?;
        Ok(ff_pair_loss(&p, &n, self.layer.theta))
    }

    fn gradients(&self) -> Result<Vec<Tensor<f64>>> {
        let p = self.layer.forward(&self.pos)?;
        let n = self.layer.forward(&self.neg)?;
        let g = ff_backward(&self.layer, &self.pos, &p, &self.neg, &n)?;
        Ok(vec![g.d_weight, g.d_bias])
    }
}

// Random problems are redrawn when a central difference at FD_EPSILON could
// not resolve them: `f` close to a relu or abs kink or a sin stationary point, a feature so short that
// normalization curvature dominates, or a similarity or FF pair whose loss
// gradient weight is so small that its contribution sits below the roundoff
// floor of the difference quotient.
const KINK_MARGIN: f64 = 1e-3;
const MIN_FEATURE_LEN: f64 = 0.05;
const MIN_HEAD_WEIGHT: f64 = 1e-3;

fn gaussian(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
}

fn random_opts(rng: &mut ChaCha8Rng, scale_flags: Option<bool>) -> HeadOptions {
    let activation =
        *[Activation::Relu, Activation::Tanh, Activation::Sin, Activation::Abs].choose(rng).expect("non-empty");
    let placement = if rng.random_bool(0.5) { LossPlacement::PostActivation } else { LossPlacement::PreActivation };
    let (scale_input, scale_sims) = match scale_flags {
        Some(on) => (on, on),
        None => (rng.random_bool(0.5), rng.random_bool(0.5)),
    };
    HeadOptions {
        activation,
        placement,
        scale_input,
        scale_sims,
        tau: *[0.5, 1.0, 2.0, 5.0, 10.0].choose(rng).expect("non-empty"),
    }
}

fn random_kind(rng: &mut ChaCha8Rng) -> LossKind {
    if rng.random_bool(0.5) {
        LossKind::SmoothMargin
    } else {
        LossKind::CrossEntropy
    }
}

/// Smallest weight any prototype similarity carries into the loss gradient,
/// `|dL/dscore_c| * exp(tau (s_cp - score_c))`, over the batch.
fn weakest_head_path(scores: &ClassScores<f64>, labels: &[usize], kind: LossKind, tau: f64) -> f64 {
    let (c, p) = (scores.sims.dim(1), scores.sims.dim(2));
    let mut dg = vec![0.0; c];
    let mut weakest = f64::INFINITY;
    for (i, &y) in labels.iter().enumerate() {
        let g = scores.scores.row(i);
        match kind {
            LossKind::CrossEntropy => {
                cross_entropy_with_grad(g, y, &mut dg);
            }
            _ => {
                smooth_margin_with_grad(g, y, tau, &mut dg);
            }
        }
        let sims = scores.sims.row(i);
        for (k, &s) in sims.iter().enumerate() {
            let w = (tau * (s - g[k / p])).exp();
            weakest = weakest.min(dg[k / p].abs() * w);
        }
    }
    weakest
}

fn has_kink(act: Activation, f: &Tensor<f64>) -> bool {
    match act {
        Activation::Relu | Activation::Abs => f.data().iter().any(|v| v.abs() < KINK_MARGIN),
        Activation::Sin => f.data().iter().any(|v| v.cos().abs() < KINK_MARGIN),
        _ => false,
    }
}

impl DenseProblem {
    /// Random layer with `Din, Dout <= 12`, `C <= 5`, `P <= 3`, `B <= 4`.
    /// `scale_flags` pins both scale options; `None` draws them.
    pub fn random(rng: &mut ChaCha8Rng, scale_flags: Option<bool>) -> Result<Self> {
        loop {
            let din = rng.random_range(1..=12);
            let dout = rng.random_range(2..=12);
            let classes = rng.random_range(2..=5);
            let per_class = rng.random_range(1..=3);
            let batch = rng.random_range(1..=4);
            let opts = random_opts(rng, scale_flags);
            let protos = random_prototypes(classes, per_class, dout, rng)?;
            let layer = DenseLayer::from_parts(
                gaussian(&[dout, din], 1.0 / (din as f64).sqrt(), rng),
                gaussian(&[dout], 0.3, rng),
                protos,
                opts,
                0.99,
            )?;
            let input = gaussian(&[batch, din], 1.0, rng);
            let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
            let kind = random_kind(rng);
            let fwd = layer.forward(&input, ProtoSet::Raw)?;
            if has_kink(opts.activation, &fwd.f)
                || fwd.feat_len.iter().any(|&l| l < MIN_FEATURE_LEN)
                || weakest_head_path(&fwd.scores, &labels, kind, opts.tau) < MIN_HEAD_WEIGHT
            {
                continue;
            }
            return Ok(DenseProblem { layer, input, labels, kind });
        }
    }
}

impl ConvProblem {
    /// Random layer with `H, W <= 6`, `Cout <= 4`, optional aux projection.
    pub fn random(rng: &mut ChaCha8Rng) -> Result<Self> {
        loop {
            let cin = rng.random_range(1..=3);
            // A one-dimensional unit feature is constant up to sign and has no
            // gradient, so the scored feature is at least two wide.
            let cout = rng.random_range(2..=4);
            let h = rng.random_range(2..=6);
            let w = rng.random_range(2..=6);
            let k = rng.random_range(1..=3.min(h).min(w));
            let pad = rng.random_range(0..=k / 2);
            let stride = rng.random_range(1..=2);
            let aux = if rng.random_bool(0.5) { Some(rng.random_range(2..=5)) } else { None };
            let classes = rng.random_range(2..=5);
            let per_class = rng.random_range(1..=3);
            let batch = rng.random_range(1..=3);
            let opts = random_opts(rng, None);
            let proto_dim = aux.unwrap_or(cout);
            let protos = random_prototypes(classes, per_class, proto_dim, rng)?;
            let fan_in = cin * k * k;
            let layer = ConvLayer::from_parts(
                gaussian(&[cout, cin, k, k], 1.0 / (fan_in as f64).sqrt(), rng),
                gaussian(&[cout], 0.3, rng),
                aux.map(|a| gaussian(&[a, cout, 1, 1], 1.0 / (cout as f64).sqrt(), rng)),
                protos,
                opts,
                stride,
                pad,
                0.99,
            )?;
            let input = gaussian(&[batch, cin, h, w], 1.0, rng);
            let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
            let kind = random_kind(rng);
            let fwd = layer.forward(&input, ProtoSet::Raw)?;
            if has_kink(opts.activation, &fwd.f_map)
                || fwd.z_len.iter().any(|&l| l < MIN_FEATURE_LEN)
                || weakest_head_path(&fwd.scores, &labels, kind, opts.tau) < MIN_HEAD_WEIGHT
            {
                continue;
            }
            return Ok(ConvProblem { layer, input, labels, kind });
        }
    }
}

impl FfProblem {
    pub fn random(rng: &mut ChaCha8Rng) -> Result<Self> {
        loop {
            let din = rng.random_range(1..=12);
            let dout = rng.random_range(1..=12);
            let batch = rng.random_range(1..=4);
            let theta = rng.random_range(0.5..3.0);
            let layer = FfLayer::from_parts(
                gaussian(&[dout, din], 1.0 / (din as f64).sqrt(), rng),
                gaussian(&[dout], 0.3, rng),
                theta,
            )?;
            let pos = gaussian(&[batch, din], 1.0, rng);
            let neg = gaussian(&[batch, din], 1.0, rng);
            let (pf, nf) = (layer.forward(&pos)?, layer.forward(&neg)?);
            let saturated = pf.goodness.iter().zip(&nf.goodness).any(|(&gp, &gn)| {
                let (_, dp, dn) = ff_loss_with_grad(gp, gn, theta);
                dp.abs().min(dn) < MIN_HEAD_WEIGHT
            });
            if has_kink(Activation::Relu, &pf.f) || has_kink(Activation::Relu, &nf.f) || saturated {
                continue;
            }
            return Ok(FfProblem { layer, pos, neg });
        }
    }
}
