use std::path::Path;
use std::process::{Command, Output};

use hff_core::data::{gaussian_blobs, write_idx_images, write_idx_labels};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hff")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// 8x8 three-class IDX dataset under `root/mnist`; `noisy_test` replaces the
/// test labels with seeded noise.
fn write_mnist(root: &Path, noisy_test: bool) {
    let dir = root.join("mnist");
    std::fs::create_dir_all(&dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (prefix, per_class, seed) in [("train", 80, 1), ("t10k", 40, 2)] {
        let ds = gaussian_blobs(per_class, 3, 64, 0.2, seed);
        let pixels: Vec<u8> = ds.images.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        let mut labels: Vec<u8> = ds.labels.iter().map(|&y| y as u8).collect();
        if noisy_test && prefix == "t10k" {
            labels.iter_mut().for_each(|y| *y = rng.random_range(0..3));
        }
        write_idx_images(&dir.join(format!("{prefix}-images-idx3-ubyte")), ds.len(), 8, 8, &pixels).unwrap();
        write_idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")), &labels).unwrap();
    }
}

fn train_args<'a>(root: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "train",
        "--data-root",
        root,
        "--out",
        out,
        "--arch",
        "16-12",
        "--epochs",
        "3",
        "--batch-size",
        "16",
        "--lr",
        "0.01",
        "--record-seconds",
        "false",
    ];
    args.extend_from_slice(extra);
    args
}

fn test_accuracy(o: &Output) -> f64 {
    let text = stdout(o);
    let line = text.lines().find(|l| l.starts_with("test accuracy:")).unwrap();
    line["test accuracy:".len()..].trim().parse().unwrap()
}

/// `(layer, accuracy)` rows of an eval table.
fn eval_rows(text: &str) -> Vec<f64> {
    let mut lines = text.lines().skip_while(|l| *l != "layer,accuracy,headline");
    lines.next().unwrap();
    lines.take_while(|l| l.split(',').count() == 3).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
}

#[test]
fn gradcheck_scopes_and_injected_faults() {
    let ok = hff(&["gradcheck", "--scope", "conv", "--configs", "10"]);
    assert!(ok.status.success(), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("all checks passed"));
    let bad = hff(&["gradcheck", "--scope", "dense", "--configs", "10", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(1), "{}", stdout(&bad));
    let unknown = hff(&["gradcheck", "--scope", "everything"]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn invalid_configs_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    write_mnist(dir.path(), false);
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    let zero = hff(&train_args(root, out, &["--epochs", "0"]));
    assert_eq!(zero.status.code(), Some(2), "{}", stderr(&zero));
    assert!(stderr(&zero).contains("epochs"));
    let typo = hff(&train_args(root, out, &["--widht", "3"]));
    assert_eq!(typo.status.code(), Some(2));
    assert!(stderr(&typo).contains("widht"));
    let missing = hff(&["train", "--data-root", out, "--out", out, "--epochs", "1"]);
    assert_eq!(missing.status.code(), Some(3), "{}", stderr(&missing));
}

#[test]
fn train_then_eval_reproduces_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    write_mnist(dir.path(), false);
    let root = dir.path().to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let trained = hff(&train_args(root, a.to_str().unwrap(), &[]));
    assert!(trained.status.success(), "{}", stderr(&trained));
    let acc = test_accuracy(&trained);
    assert!(acc >= 0.9, "{acc}");

    let model = a.join("model.bin");
    let eval = hff(&["eval", "--model", model.to_str().unwrap(), "--data-root", root]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let rows = eval_rows(&stdout(&eval));
    assert_eq!(rows.len(), 2);
    assert_eq!(format!("{:.6}", rows[1]), format!("{acc:.6}"));
    assert_eq!(rows, eval_rows(&stdout(&trained)));

    let again = hff(&train_args(root, b.to_str().unwrap(), &[]));
    assert!(again.status.success());
    for file in ["metrics.csv", "model.bin"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }

    let mut bytes = std::fs::read(&model).unwrap();
    bytes[4] += 1;
    let bumped = dir.path().join("bumped.bin");
    std::fs::write(&bumped, bytes).unwrap();
    let rejected = hff(&["eval", "--model", bumped.to_str().unwrap(), "--data-root", root]);
    assert_eq!(rejected.status.code(), Some(3));
    assert!(stderr(&rejected).contains("version"));
}

#[test]
fn untrained_model_evaluates_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    write_mnist(dir.path(), true);
    let root = dir.path().to_str().unwrap();
    let out = dir.path().join("run");
    let run = hff(&train_args(root, out.to_str().unwrap(), &["--lr", "0", "--epochs", "1"]));
    assert!(run.status.success(), "{}", stderr(&run));
    let model = out.join("model.bin");
    let eval = hff(&["eval", "--model", model.to_str().unwrap(), "--data-root", root]);
    // 120 noisy labels over 3 classes: 4 standard deviations is about 0.17.
    for acc in eval_rows(&stdout(&eval)) {
        assert!((acc - 1.0 / 3.0).abs() <= 4.0 * (2.0f64 / 9.0 / 120.0).sqrt(), "{acc}");
    }
}

#[test]
fn bench_emits_csv_and_checks_ratio() {
    let args = [
        "bench",
        "--classes",
        "10",
        "--arch",
        "32-16",
        "--input-len",
        "64",
        "--images",
        "20",
        "--warmup",
        "5",
        "--repeats",
        "3",
    ];
    let run = hff(&args);
    assert!(run.status.success(), "{}", stderr(&run));
    let text = stdout(&run);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "method,seconds,imgs_per_s,ms_per_img,passes_per_img,batch,warmup");
    for (line, name, passes) in [(lines[1], "hff", "1"), (lines[2], "ff", "10")] {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 7);
        assert_eq!((cols[0], cols[4]), (name, passes));
    }
    let mut strict = args.to_vec();
    strict.extend(["--assert-ratio", "1000000"]);
    assert_eq!(hff(&strict).status.code(), Some(1));
}

#[test]
fn ablate_grid_of_one_matches_train() {
    let dir = tempfile::tempdir().unwrap();
    write_mnist(dir.path(), false);
    let root = dir.path().to_str().unwrap();
    let grid = dir.path().join("grid.txt");
    std::fs::write(&grid, "tau = 10\n").unwrap();
    let out = dir.path().join("run");
    let trained = hff(&train_args(root, out.to_str().unwrap(), &[]));
    let mut args = vec!["ablate", "--grid", grid.to_str().unwrap()];
    args.extend(&train_args(root, "", &[])[1..]);
    args.retain(|a| !a.is_empty() && *a != "--out");
    let ablated = hff(&args);
    assert!(ablated.status.success(), "{}", stderr(&ablated));
    let text = stdout(&ablated);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "tau,accuracy,seconds");
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1].split(',').nth(1).unwrap(), format!("{:.6}", test_accuracy(&trained)));

    std::fs::write(&grid, "width = 3\n").unwrap();
    let bad = hff(&args);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("accepted axes"));
}
