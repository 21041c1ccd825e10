mod common;

use common::{blobs, toy_config};
use hff_core::artifact::{from_bytes, load, save, to_bytes, MAGIC, VERSION};
use hff_core::config::{parse_arch, TrainConfig, PRESETS};
use hff_core::model::Model;
use hff_core::train::{prepare_splits, train};
use hff_core::HffError;
use proptest::prelude::*;

fn trained(cfg: &TrainConfig) -> Model {
    let (tr, va, _) = blobs(cfg, 30, 3, 12, 0.2);
    train(cfg, &tr, &va).unwrap().model
}

fn conv_model() -> Model {
    let mut cfg = TrainConfig::preset("mnist-cnn").unwrap();
    cfg.arch = parse_arch("c3a5-c2-6").unwrap();
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.record_seconds = false;
    let full = hff_core::data::gaussian_blobs(20, 3, 2 * 36, 0.2, 1).unflatten(2, 6, 6).unwrap();
    let test = hff_core::data::gaussian_blobs(4, 3, 2 * 36, 0.2, 2).unflatten(2, 6, 6).unwrap();
    let (tr, va, _) = prepare_splits(&cfg, full, test).unwrap();
    train(&cfg, &tr, &va).unwrap().model
}

fn models() -> Vec<Model> {
    let mut f64_cfg = toy_config("8-6", 2);
    f64_cfg.set("precision", "f64").unwrap();
    let mut ff = toy_config("8-6", 2);
    ff.set("loss_kind", "ff").unwrap();
    let mut protos = toy_config("8", 2);
    protos.protos_per_class = 3;
    vec![trained(&toy_config("8-6", 2)), trained(&f64_cfg), trained(&ff), trained(&protos), conv_model()]
}

#[test]
fn artifacts_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for (i, model) in models().into_iter().enumerate() {
        let path = dir.path().join(format!("m{i}.bin"));
        save(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = load(&path).unwrap();
        assert_eq!(back, model, "model {i}");
        assert_eq!(to_bytes(&back), bytes, "model {i}");
        assert_eq!(back.network.checksum(None), model.network.checksum(None));
    }
}

#[test]
fn other_versions_are_rejected() {
    let mut bytes = to_bytes(&trained(&toy_config("8", 1)));
    bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    match from_bytes(&bytes) {
        Err(HffError::Artifact(msg)) => assert!(msg.contains("version 2"), "{msg}"),
        other => panic!("expected an artifact error, got {other:?}"),
    }
}

#[test]
fn structural_damage_is_reported() {
    let model = trained(&toy_config("16-16", 1));
    let bytes = to_bytes(&model);
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(matches!(from_bytes(&wrong_magic), Err(HffError::Artifact(_))));

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(from_bytes(&trailing), Err(HffError::Artifact(_))));

    // Same-length edit of the stored arch leaves the layer shapes disagreeing.
    let needle = b"arch = 16-16";
    let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap() + needle.len() - 1;
    let mut reshaped = bytes.clone();
    reshaped[at] = b'7';
    assert!(matches!(from_bytes(&reshaped), Err(HffError::Artifact(_))));

    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load(&dir.path().join("missing.bin")), Err(HffError::Io { .. })));
}

#[test]
fn config_errors_name_key_and_choices() {
    let mut cfg = TrainConfig::default();
    let err = cfg.set("widht", "3").unwrap_err().to_string();
    assert!(err.contains("widht") && err.contains("protos_per_class"), "{err}");
    let err = cfg.set("activation", "gelu").unwrap_err().to_string();
    assert!(err.contains("activation") && err.contains("relu"), "{err}");
    let err = cfg.set("mode", "fast").unwrap_err().to_string();
    assert!(err.contains("greedy") && err.contains("per_batch_local"), "{err}");

    cfg.apply_overrides(&["--epochs".into(), "0".into()]).unwrap();
    assert!(matches!(cfg.validate(), Err(HffError::Config(_))));
    let mut cfg = TrainConfig::default();
    assert!(matches!(cfg.apply_overrides(&["--epochs".into()]), Err(HffError::Usage(_))));
    assert!(matches!(cfg.apply_overrides(&["epochs".into(), "2".into()]), Err(HffError::Usage(_))));
    assert!(TrainConfig::parse("arch = c8-16-c4").is_err());
    assert!(TrainConfig::parse("no equals sign").is_err());
}

#[test]
fn overrides_apply_after_presets() {
    let mut cfg = TrainConfig::preset("mnist-cnn").unwrap();
    let args: Vec<String> =
        ["--batch-size", "7", "--preset", "mnist-mlp-small", "--tau", "3"].iter().map(|s| s.to_string()).collect();
    cfg.apply_overrides(&args).unwrap();
    let mut want = TrainConfig::preset("mnist-mlp-small").unwrap();
    want.tau = 3.0;
    assert_eq!(cfg, want);
    for name in PRESETS {
        let p = TrainConfig::preset(name).unwrap();
        p.validate().unwrap();
        assert_eq!(TrainConfig::parse(&format!("preset = {name}")).unwrap(), p);
    }
}

fn arch_strategy() -> impl Strategy<Value = String> {
    let conv = (1usize..64, prop::option::of(1usize..64))
        .prop_map(|(c, a)| a.map_or_else(|| format!("c{c}"), |a| format!("c{c}a{a}")));
    (prop::collection::vec(conv, 0..3), prop::collection::vec(1usize..4096, 0..4))
        .prop_filter("at least one layer", |(c, d)| !c.is_empty() || !d.is_empty())
        .prop_map(|(c, d)| c.into_iter().chain(d.into_iter().map(|w| w.to_string())).collect::<Vec<_>>().join("-"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn config_text_round_trips(
        arch in arch_strategy(),
        act in prop::sample::select(vec!["relu", "tanh", "sin", "abs"]),
        loss in prop::sample::select(vec!["sm", "ce"]),
        tau in 1e-3f64..1e4, p in 1usize..9, lr in 0.0f64..1.0, seed in any::<u64>(),
        flags in any::<(bool, bool, bool, bool)>(),
        target in prop::option::of(0.0f64..=1.0),
    ) {
        let mut cfg = TrainConfig::default();
        cfg.set("arch", &arch).unwrap();
        cfg.set("activation", act).unwrap();
        cfg.set("loss_kind", loss).unwrap();
        cfg.tau = tau;
        cfg.protos_per_class = p;
        cfg.lr = lr;
        cfg.seed = seed;
        (cfg.scale_input, cfg.scale_sims, cfg.eval_with_ema, cfg.augment) = flags;
        cfg.target_acc = target;
        prop_assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn corrupted_artifacts_never_panic(cut in 0usize..2000, flips in prop::collection::vec((0usize..2000, any::<u8>()), 0..4)) {
        thread_local! {
            static BYTES: Vec<u8> = to_bytes(&trained(&toy_config("6-4", 1)));
        }
        let mut bytes = BYTES.with(|b| b.clone());
        for (at, v) in flips {
            let n = bytes.len();
            bytes[at % n] = v;
        }
        bytes.truncate(cut.min(bytes.len()));
        let _ = from_bytes(&bytes);
    }
}
