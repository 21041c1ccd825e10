use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand_distr::{Distribution, StandardNormal};

use hff_core::ablate::{run_grid, Grid};
use hff_core::artifact;
use hff_core::bench::{benchmark, trunk_pair, BenchOptions, BENCH_HEADER};
use hff_core::config::{parse_arch, TrainConfig};
use hff_core::data::{data_root, LabeledDataset};
use hff_core::layers::ProtoSet;
use hff_core::model::{AnyNetwork, Model};
use hff_core::rng::{stream, Purpose};
use hff_core::tensor::Tensor;
use hff_core::train::{load_splits, metrics_csv, train};
use hff_core::verify::{run_suite, Scope, SuiteConfig};
use hff_core::{HffError, Result};

#[derive(Parser)]
#[command(name = "hff", version, about = "Train, evaluate and benchmark HFF networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes metrics.csv and model.bin.
    Train(TrainArgs),
    /// Per-layer accuracy of a saved model.
    Eval(EvalArgs),
    /// Inference latency of HFF against the multi-pass FF baseline.
    Bench(BenchArgs),
    /// Finite-difference, orthogonality and Lipschitz checks.
    Gradcheck(GradcheckArgs),
    /// Train every cell of an ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset applied before the config file.
    #[arg(long)]
    preset: Option<String>,
    /// Dataset root (defaults to $DATA_ROOT, then ./data).
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Config overrides as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value = "model.bin")]
    model: PathBuf,
    /// `test` or `val`.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Trained HFF model; without it an untrained trunk is used.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Trained FF model; without it an untrained FF net with the same trunk is used.
    #[arg(long)]
    ff_model: Option<PathBuf>,
    /// Class count for untrained trunks.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Dense trunk for untrained models.
    #[arg(long, default_value = "1024-512-256")]
    arch: String,
    /// Input width for untrained models.
    #[arg(long, default_value_t = 784)]
    input_len: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 50)]
    warmup: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Images per timed sweep.
    #[arg(long, default_value_t = 200)]
    images: usize,
    /// More than one measures throughput rather than latency.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Exit nonzero unless FF latency / HFF latency reaches this ratio.
    #[arg(long)]
    assert_ratio: Option<f64>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Also write the CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// all, dense, conv, ff, orthogonality or lipschitz.
    #[arg(long, default_value = "all")]
    scope: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random configurations per layer kind.
    #[arg(long, default_value_t = 100)]
    configs: usize,
    /// Perturb one analytic gradient to exercise the failure path.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Grid file of `axis = v1, v2` lines.
    #[arg(long)]
    grid: PathBuf,
    /// CSV output path (also printed).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Pulls flags clap leaves in the trailing override list back out.
fn take_flag(overrides: &mut Vec<String>, name: &str) -> Option<String> {
    let i = overrides.iter().position(|a| a == name)?;
    let value = overrides.get(i + 1).cloned();
    overrides.drain(i..(i + 2).min(overrides.len()));
    value
}

impl ConfigArgs {
    fn resolve(mut self, extra: &mut [(&str, &mut Option<String>)]) -> Result<(TrainConfig, PathBuf)> {
        for (name, slot) in extra.iter_mut() {
            if let Some(v) = take_flag(&mut self.overrides, name) {
                **slot = Some(v);
            }
        }
        let preset = take_flag(&mut self.overrides, "--preset").or(self.preset);
        let config = take_flag(&mut self.overrides, "--config").map(PathBuf::from).or(self.config);
        let root = take_flag(&mut self.overrides, "--data-root")
            .map(PathBuf::from)
            .or(self.data_root)
            .unwrap_or_else(data_root);
        let mut cfg = match &preset {
            Some(p) => TrainConfig::preset(p)?,
            None => TrainConfig::default(),
        };
        if let Some(path) = config {
            let text = fs::read_to_string(&path).map_err(|e| HffError::Io { path, source: e })?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok((cfg, root))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HffError::Io { path: path.to_path_buf(), source: e })
}

fn cmd_train(mut a: TrainArgs) -> Result<bool> {
    let mut out = None;
    let (cfg, root) = a.config.resolve(&mut [("--out", &mut out)])?;
    if let Some(o) = out {
        a.out = PathBuf::from(o);
    }
    fs::create_dir_all(&a.out).map_err(|e| HffError::Io { path: a.out.clone(), source: e })?;
    let (train_set, val, test) = load_splits(&cfg, &root)?;
    eprintln!(
        "training {} on {} ({} train, {} val, {} test)",
        hff_core::config::arch_string(&cfg.arch),
        cfg.dataset.name(),
        train_set.len(),
        val.len(),
        test.len()
    );
    let outcome = train(&cfg, &train_set, &val)?;
    for r in &outcome.reports {
        eprintln!("{}", r.csv_row());
    }
    write(&a.out.join("metrics.csv"), &metrics_csv(&outcome.reports))?;
    artifact::save(&outcome.model, &a.out.join("model.bin"))?;
    let eval = outcome.model.evaluate(&test)?;
    print_eval(&eval.per_layer);
    println!("test accuracy: {:.6}", eval.accuracy);
    if let Some(e) = outcome.epochs_to_target {
        println!("epochs to target: {e}");
    }
    Ok(true)
}

fn print_eval(per_layer: &[f64]) {
    println!("layer,accuracy,headline");
    for (i, acc) in per_layer.iter().enumerate() {
        let head = if i + 1 == per_layer.len() { "yes" } else { "" };
        println!("{i},{acc:.6},{head}");
    }
}

/// Test or validation split of the model's dataset, standardized with the
/// statistics stored in the artifact.
fn eval_split(model: &Model, root: &Path, split: &str) -> Result<LabeledDataset> {
    let cfg = &model.config;
    let (full, test) = cfg.dataset.load(root)?;
    let mut ds = match split {
        "test" => test,
        "val" => {
            let full = if cfg.train_limit > 0 && cfg.train_limit < full.len() {
                full.subset(&(0..cfg.train_limit).collect::<Vec<_>>())
            } else {
                full
            };
            full.split(cfg.val_fraction, cfg.seed)?.1
        }
        other => return Err(HffError::Usage(format!("--split `{other}`; expected test|val"))),
    };
    if let Some(stats) = &model.stats {
        ds.standardize(stats)?;
    }
    Ok(ds)
}

fn cmd_eval(a: EvalArgs) -> Result<bool> {
    let mut model = artifact::load(&a.model)?;
    if let Some(t) = a.threads {
        model.config.threads = t.max(1);
    }
    let root = a.data_root.unwrap_or_else(data_root);
    let ds = eval_split(&model, &root, &a.split)?;
    let eval = model.evaluate(&ds)?;
    print_eval(&eval.per_layer);
    Ok(true)
}

fn gaussian_images(n: usize, width: usize, seed: u64) -> Tensor<f32> {
    let mut rng = stream(seed, Purpose::Probe, 0);
    Tensor::from_fn(&[n, width], |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v as f32
    })
}

fn cmd_bench(a: BenchArgs) -> Result<bool> {
    let root = a.data_root.clone().unwrap_or_else(data_root);
    let (hff, set, images, base_cfg) = match &a.model {
        Some(path) => {
            let model = artifact::load(path)?;
            let mut test = eval_split(&model, &root, "test")?;
            test = test.subset(&(0..a.images.min(test.len())).collect::<Vec<_>>());
            (model.network.clone(), model.proto_set(), test.images, model.config.clone())
        }
        None => {
            let cfg = TrainConfig { arch: parse_arch(&a.arch)?, seed: a.seed, ..TrainConfig::default() };
            let (hff, _) = trunk_pair(&cfg, a.input_len, a.classes)?;
            (hff, ProtoSet::Ema, gaussian_images(a.images, a.input_len, a.seed), cfg)
        }
    };
    if hff.is_ff() {
        return Err(HffError::Usage("--model must be an HFF model; pass FF models with --ff-model".into()));
    }
    let ff: AnyNetwork = match &a.ff_model {
        Some(path) => artifact::load(path)?.network,
        None => trunk_pair(&base_cfg, hff.input_len(), hff.classes())?.1,
    };
    if !ff.is_ff() || ff.input_len() != hff.input_len() {
        return Err(HffError::Usage("--ff-model must be an FF model with the same input width".into()));
    }
    let opts = BenchOptions { batch: a.batch, warmup: a.warmup, repeats: a.repeats, threads: a.threads };
    let suffix = if a.threads > 1 { "-mt" } else { "" };
    let h = benchmark(&hff, &format!("hff{suffix}"), &images, set, opts)?;
    let f = benchmark(&ff, &format!("ff{suffix}"), &images, ProtoSet::Ema, opts)?;
    let csv = format!("{BENCH_HEADER}\n{}\n{}\n", h.csv_row(), f.csv_row());
    print!("{csv}");
    if let Some(path) = &a.out {
        write(path, &csv)?;
    }
    let ratio = f.ms_per_img / h.ms_per_img;
    eprintln!("latency ratio ff/hff: {ratio:.2} at C = {}", hff.classes());
    match a.assert_ratio {
        Some(min) if ratio < min => {
            eprintln!("ratio {ratio:.2} is below the required {min}");
            Ok(false)
        }
        _ => Ok(true),
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let scope: Scope = a.scope.parse()?;
    let cfg =
        SuiteConfig { seed: a.seed, fd_configs: a.configs, inject_fault: a.inject_fault, ..SuiteConfig::default() };
    let outcomes = run_suite(&cfg, scope)?;
    for o in &outcomes {
        println!("{o}");
    }
    let ok = outcomes.iter().all(|o| o.passed);
    println!("{}", if ok { "all checks passed" } else { "some checks failed" });
    Ok(ok)
}

fn cmd_ablate(a: AblateArgs) -> Result<bool> {
    let mut out = a.out.map(|p| p.to_string_lossy().into_owned());
    let (cfg, root) = a.config.resolve(&mut [("--out", &mut out)])?;
    let text = fs::read_to_string(&a.grid).map_err(|e| HffError::Io { path: a.grid.clone(), source: e })?;
    let grid = Grid::parse(&text)?;
    let (train_set, val, test) = load_splits(&cfg, &root)?;
    let mut csv = grid.csv_header();
    csv.push('\n');
    println!("{}", grid.csv_header());
    let rows = run_grid(&cfg, &grid, &train_set, &val, &test, |r| println!("{}", r.csv_row()))?;
    for r in rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    if let Some(path) = out {
        write(Path::new(&path), &csv)?;
    }
    Ok(true)
}
