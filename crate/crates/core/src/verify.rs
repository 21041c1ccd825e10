//! Seeded property suites behind `hff gradcheck`: finite differences for every
//! layer kind, gradient orthogonality, FF colinearity and the Lipschitz probe.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{HffError, Result};
use crate::layers::{random_prototypes, Activation, DenseLayer, FfLayer, HeadOptions, LossPlacement, ProtoSet};
use crate::objectives::gradcheck::{ConvProblem, Corrupted, DenseProblem, FfProblem};
use crate::objectives::{dense_backward, ff_backward, grad_check, GradCheckReport, GradCheckable, LossKind};
use crate::rng::{stream, Purpose};
use crate::tensor::{l2_norm, spectral_norm, Tensor};

/// Relative tolerance for analytic vs finite-difference gradients.
pub const FD_TOLERANCE: f64 = 1e-5;
/// `|<g, f>| <= ORTHO_TOLERANCE * |g| * |f|`.
pub const ORTHO_TOLERANCE: f64 = 1e-8;
/// Slack on the Lipschitz bound.
pub const LIPSCHITZ_SLACK: f64 = 1e-6;
/// Pairs whose affine output is shorter than this are skipped.
pub const LIPSCHITZ_GUARD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    All,
    Dense,
    Conv,
    Ff,
    Orthogonality,
    Lipschitz,
}

impl FromStr for Scope {
    type Err = HffError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Scope::All),
            "dense" => Ok(Scope::Dense),
            "conv" => Ok(Scope::Conv),
            "ff" => Ok(Scope::Ff),
            "orthogonality" | "ortho" => Ok(Scope::Orthogonality),
            "lipschitz" => Ok(Scope::Lipschitz),
            _ => Err(HffError::Usage(format!("scope `{s}`; expected all|dense|conv|ff|orthogonality|lipschitz"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Random configurations per finite-difference suite.
    pub fd_configs: usize,
    pub ortho_samples: usize,
    pub lipschitz_pairs: usize,
    /// Corrupts one analytic coordinate of the first dense configuration.
    pub inject_fault: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { seed: 0, fd_configs: 100, ortho_samples: 1000, lipschitz_pairs: 1000, inject_fault: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "pass" } else { "fail" };
        write!(f, "{verdict} {}: {}", self.name, self.detail)
    }
}

pub fn run_suite(cfg: &SuiteConfig, scope: Scope) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let wants = |s: Scope| scope == Scope::All || scope == s;
    if wants(Scope::Dense) {
        out.push(fd_dense(cfg)?);
    }
    if wants(Scope::Conv) {
        out.push(fd_conv(cfg)?);
    }
    if wants(Scope::Ff) {
        out.push(fd_ff(cfg)?);
    }
    if wants(Scope::Orthogonality) {
        out.push(orthogonality(cfg)?);
        out.push(ff_colinearity(cfg)?);
    }
    if wants(Scope::Lipschitz) {
        for placement in [LossPlacement::PreActivation, LossPlacement::PostActivation] {
            out.push(lipschitz(cfg, placement)?);
        }
    }
    Ok(out)
}

fn fd_outcome(name: &str, report: GradCheckReport, configs: usize) -> CheckOutcome {
    let rendered = report.render().trim_end().replace('\n', "; ");
    CheckOutcome {
        name: name.into(),
        passed: report.passed(),
        detail: format!("{configs} configs, max rel err {:.3e} ({rendered})", report.max_rel_err()),
    }
}

fn fd_dense(cfg: &SuiteConfig) -> Result<CheckOutcome> {
    let mut total = GradCheckReport::default();
    for i in 0..cfg.fd_configs {
        let mut rng = stream(cfg.seed, Purpose::Probe, i as u64);
        let problem = DenseProblem::random(&mut rng, None)?;
        let report = if cfg.inject_fault && i == 0 {
            let grads = problem.gradients()?;
            let index = largest_entry(&grads[0]);
            grad_check(&mut Corrupted { inner: problem, group: 0, index, factor: 1.01 }, FD_TOLERANCE)?
        } else {
            let mut problem = problem;
            grad_check(&mut problem, FD_TOLERANCE)?
        };
        total.merge(report);
    }
    Ok(fd_outcome("finite differences, dense HFF", total, cfg.fd_configs))
}

fn largest_entry(t: &Tensor<f64>) -> usize {
    t.data().iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).map_or(0, |(i, _)| i)
}

fn fd_conv(cfg: &SuiteConfig) -> Result<CheckOutcome> {
    let mut total = GradCheckReport::default();
    for i in 0..cfg.fd_configs {
        let mut rng = stream(cfg.seed, Purpose::Probe, (1 << 20) + i as u64);
        total.merge(grad_check(&mut ConvProblem::random(&mut rng)?, FD_TOLERANCE)?);
    }
    Ok(fd_outcome("finite differences, conv HFF", total, cfg.fd_configs))
}

fn fd_ff(cfg: &SuiteConfig) -> Result<CheckOutcome> {
    let mut total = GradCheckReport::default();
    for i in 0..cfg.fd_configs {
        let mut rng = stream(cfg.seed, Purpose::Probe, (2 << 20) + i as u64);
        total.merge(grad_check(&mut FfProblem::random(&mut rng)?, FD_TOLERANCE)?);
    }
    Ok(fd_outcome("finite differences, FF", total, cfg.fd_configs))
}

fn gaussian(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A random dense HFF layer with both scale flags off. Post placement uses
/// relu so the gradient at `f` inherits the tangency of the gradient at `h`.
fn ortho_layer(rng: &mut ChaCha8Rng, trial: usize) -> Result<DenseLayer<f64>> {
    let (din, dout) = (rng.random_range(4..=24), rng.random_range(4..=24));
    let opts = if trial.is_multiple_of(2) {
        HeadOptions { activation: Activation::Relu, placement: LossPlacement::PostActivation, ..HeadOptions::default() }
    } else {
        let act = Activation::ALL[rng.random_range(0..Activation::ALL.len())];
        HeadOptions { activation: act, placement: LossPlacement::PreActivation, ..HeadOptions::default() }
    };
    let opts = HeadOptions { tau: [1.0, 5.0, 10.0][trial % 3], ..opts };
    let classes = rng.random_range(2..=10);
    let per_class = rng.random_range(1..=4);
    let protos = random_prototypes(classes, per_class, dout, rng)?;
    DenseLayer::from_parts(
        gaussian(&[dout, din], 1.0 / (din as f64).sqrt(), rng),
        gaussian(&[dout], 0.1, rng),
        protos,
        opts,
        0.99,
    )
}

/// With scale flags off the loss depends on `f` only through its direction,
/// so the gradient at `f` has no radial part.
fn orthogonality(cfg: &SuiteConfig) -> Result<CheckOutcome> {
    const PER_LAYER: usize = 50;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut trial = 0;
    while checked < cfg.ortho_samples {
        let mut rng = stream(cfg.seed, Purpose::Probe, (3 << 20) + trial as u64);
        let layer = ortho_layer(&mut rng, trial)?;
        trial += 1;
        let b = PER_LAYER.min(cfg.ortho_samples - checked);
        let x = gaussian(&[b, layer.in_dim()], 1.0, &mut rng);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..layer.classes())).collect();
        let kind = if trial.is_multiple_of(2) { LossKind::SmoothMargin } else { LossKind::CrossEntropy };
        let fwd = layer.forward(&x, ProtoSet::Raw)?;
        let g = dense_backward(&layer, &x, &fwd, &labels, kind, ProtoSet::Raw)?;
        for (gr, fr) in g.d_f.rows().zip(fwd.f.rows()) {
            let scale = l2_norm(gr) * l2_norm(fr);
            if scale > 0.0 {
                worst = worst.max(dot(gr, fr).abs() / scale);
            }
            checked += 1;
        }
    }
    Ok(CheckOutcome {
        name: "orthogonality, dense HFF".into(),
        passed: worst <= ORTHO_TOLERANCE,
        detail: format!("{checked} samples over {trial} layers, max |<g,f>|/(|g||f|) {worst:.3e}"),
    })
}

/// The FF gradient at `f` is `2 dL/dg * f` on the active coordinates.
fn ff_colinearity(cfg: &SuiteConfig) -> Result<CheckOutcome> {
    let mut rng = stream(cfg.seed, Purpose::Probe, 4 << 20);
    let (din, dout) = (20, 16);
    let layer = FfLayer::from_parts(
        gaussian(&[dout, din], 1.0 / (din as f64).sqrt(), &mut rng),
        gaussian(&[dout], 0.1, &mut rng),
        2.0,
    )?;
    let b = cfg.ortho_samples.div_ceil(2).max(1);
    let pos = gaussian(&[b, din], 1.0, &mut rng);
    let neg = gaussian(&[b, din], 1.0, &mut rng);
    let pf = layer.forward(&pos)?;
    let nf = layer.forward(&neg)?;
    let g = ff_backward(&layer, &pos, &pf, &neg, &nf)?;
    let mut worst_cos = 1.0f64;
    let mut checked = 0;
    for (row, gr) in g.d_f.rows().enumerate() {
        let fr = if row < b { pf.f.row(row) } else { nf.f.row(row - b) };
        let active: Vec<(f64, f64)> = gr.iter().zip(fr).filter(|(_, &f)| f > 0.0).map(|(&g, &f)| (g, f)).collect();
        let (ga, fa): (Vec<f64>, Vec<f64>) = active.into_iter().unzip();
        let scale = l2_norm(&ga) * l2_norm(&fa);
        if scale > 0.0 {
            worst_cos = worst_cos.min(dot(&ga, &fa).abs() / scale);
            checked += 1;
        }
    }
    Ok(CheckOutcome {
        name: "colinearity, FF".into(),
        passed: 1.0 - worst_cos <= ORTHO_TOLERANCE,
        detail: format!("{checked} samples, min |cos| {worst_cos:.12}"),
    })
}

/// `||scores(x1) - scores(x2)|| <= ||W||_2 ||x1 - x2||` on random pairs, with
/// separations drawn log-uniformly from 1e-3 to 10.
fn lipschitz(cfg: &SuiteConfig, placement: LossPlacement) -> Result<CheckOutcome> {
    let index = match placement {
        LossPlacement::PreActivation => 0,
        LossPlacement::PostActivation => 1,
    };
    let mut rng = stream(cfg.seed, Purpose::Probe, (5 << 20) + index);
    let (din, dout) = (32, 32);
    let opts = HeadOptions { activation: Activation::Relu, placement, ..HeadOptions::default() };
    let protos = random_prototypes(10, 1, dout, &mut rng)?;
    let layer = DenseLayer::from_parts(
        gaussian(&[dout, din], 1.0 / (din as f64).sqrt(), &mut rng),
        gaussian(&[dout], 0.1, &mut rng),
        protos,
        opts,
        0.99,
    )?;
    let bound = spectral_norm(&layer.weight, 1000, cfg.seed)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    while checked < cfg.lipschitz_pairs {
        let x1 = gaussian(&[1, din], 1.0, &mut rng);
        let sep = 10f64.powf(rng.random_range(-3.0..1.0));
        let dir = gaussian(&[din], 1.0, &mut rng);
        let n = l2_norm(dir.data());
        let x2 = Tensor::from_fn(&[1, din], |j| x1.data()[j] + sep * dir.data()[j] / n);
        let f1 = layer.forward(&x1, ProtoSet::Raw)?;
        let f2 = layer.forward(&x2, ProtoSet::Raw)?;
        if [&f1, &f2].iter().any(|f| f.feat_len[0] < LIPSCHITZ_GUARD || l2_norm(f.f.row(0)) < LIPSCHITZ_GUARD) {
            skipped += 1;
            continue;
        }
        let ds: Vec<f64> = f1.scores.scores.data().iter().zip(f2.scores.scores.data()).map(|(a, b)| a - b).collect();
        worst = worst.max(l2_norm(&ds) / (bound * sep));
        checked += 1;
    }
    Ok(CheckOutcome {
        name: format!("lipschitz, dense HFF {}-activation", placement.name()),
        passed: worst <= 1.0 + LIPSCHITZ_SLACK,
        detail: format!("{checked} pairs ({skipped} guarded out), ||W||_2 {bound:.4}, max ratio to bound {worst:.4}"),
    })
}
