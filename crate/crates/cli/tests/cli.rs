use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use iirsnn_cli::config::DatasetKind;
use iirsnn_cli::RunConfig;

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml")
}

fn iirsnn(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iirsnn"))
        .arg("--config")
        .arg(config_path())
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = iirsnn(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const PIPELINE: &[&[&str]] = &[
    &["train-ann"],
    &["convert", "--timesteps", "3"],
    &["train-snn"],
    &["iir"],
    &["probe", "--timesteps", "1"],
    &["analyze"],
    &["prune", "--keep-fraction", "0.2"],
    &["infer"],
];

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for sub in ["checkpoints", "metrics", "reports"] {
        for entry in std::fs::read_dir(root.join(sub)).unwrap() {
            out.push(entry.unwrap().path().strip_prefix(root).unwrap().to_path_buf());
        }
    }
    out.sort();
    out
}

#[test]
fn full_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        for args in PIPELINE {
            let stdout = ok(dir, args);
            if args[0] == "infer" {
                // Timesteps come from the checkpoint of the last stage.
                assert!(stdout.contains("infer T=1"), "{stdout}");
            }
        }
    }
    let listed = files(a.path());
    for expected in [
        "checkpoints/ann.ckpt",
        "checkpoints/converted.ckpt",
        "checkpoints/snn_T3.ckpt",
        "checkpoints/iir_3-2-1_T3.ckpt",
        "checkpoints/iir_3-2-1_T2.ckpt",
        "checkpoints/iir_3-2-1_T1.ckpt",
        "checkpoints/pruned_iir_3-2-1_T1_k0.2.ckpt",
        "metrics/ann_train.csv",
        "metrics/iir_3-2-1_stages.csv",
        "reports/spike_rates.csv",
        "reports/energy.csv",
        "reports/memory.csv",
        "reports/probe_iir_3-2-1_T3_at_T1.csv",
        "reports/predictions_iir_3-2-1_T1.csv",
    ] {
        assert!(
            listed.contains(&PathBuf::from(expected)),
            "missing {expected} in {listed:?}"
        );
    }
    assert_eq!(listed, files(b.path()));
    for f in &listed {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{} differs between identical runs", f.display());
    }

    let rates = std::fs::read_to_string(a.path().join("reports/spike_rates.csv")).unwrap();
    assert!(rates.starts_with("run,hidden_layer,spike_rate\n"));
    for t in [3, 2, 1] {
        assert!(rates.contains(&format!("iir_3-2-1_T{t},")), "{rates}");
    }
}

#[test]
fn missing_dependency_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    for (args, producer) in [
        (&["train-snn"][..], "convert"),
        (&["convert"][..], "train-ann"),
        (&["iir"][..], "train-ann"),
        (&["infer"][..], "iir"),
    ] {
        let o = iirsnn(dir.path(), args);
        assert!(!o.status.success(), "{args:?} should fail");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(
            err.contains(&format!("run `iirsnn {producer}` first")),
            "{args:?}: {err}"
        );
    }
}

#[test]
fn bad_flags_fail_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let o = iirsnn(dir.path(), &["--stages", "1,3", "iir"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("strictly decreasing"));
    let o = iirsnn(dir.path(), &["prune", "--keep-fraction", "0"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("keep_fraction"));
}

#[test]
fn config_round_trips() {
    for cfg in [RunConfig::default(), RunConfig::load(&config_path()).unwrap()] {
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }
    let mnist = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mnist.toml");
    let cfg = RunConfig::load(&mnist).unwrap();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
}

#[test]
fn empty_config_gives_paper_defaults() {
    let cfg = RunConfig::from_toml("").unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(
        (cfg.ann.initial_lr, cfg.ann.momentum, cfg.ann.weight_decay),
        (0.01, 0.9, 0.0005)
    );
    assert_eq!((cfg.snn.initial_lr, cfg.snn.epochs), (1e-4, 300));
    assert_eq!(cfg.conversion.percentile, 90.0);
    assert_eq!(cfg.iir.stages, vec![5, 4, 3, 2, 1]);
}

#[test]
fn config_validation() {
    assert!(RunConfig::from_toml("unknown = 1").is_err());
    assert!(RunConfig::from_toml("[ann]\nlr = 0.1").is_err());

    let mut cfg = RunConfig::default();
    cfg.validate().unwrap();
    cfg.prune.keep_fraction = 1.5;
    assert!(cfg.validate().is_err());

    let mut cfg = RunConfig::default();
    cfg.dataset.kind = DatasetKind::Mnist;
    cfg.dataset.path = Some("/definitely/not/here".into());
    assert!(cfg.validate().is_err());

    let cfg = RunConfig {
        network: "no-such-network".into(),
        ..RunConfig::default()
    };
    assert!(cfg.validate().is_err());

    let mut cfg = RunConfig::default();
    cfg.iir.stages = vec![3, 3, 1];
    assert!(cfg.validate().is_err());

    let mut cfg = RunConfig::default();
    cfg.apply_seed(7);
    assert_eq!(
        (cfg.ann.seed, cfg.snn.seed, cfg.conversion.seed, cfg.dataset.split.seed),
        (7, 7, 7, 7)
    );
}

#[test]
fn custom_network_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = iirsnn::NetworkSpec::deep_mlp([1, 8, 8], 4, 2, 16);
    let path = dir.path().join("net.json");
    std::fs::write(&path, serde_json::to_string(&spec).unwrap()).unwrap();
    let mut cfg = RunConfig::load(&config_path()).unwrap();
    cfg.network = path.to_string_lossy().into_owned();
    cfg.validate().unwrap();
    let data = cfg.load_dataset().unwrap();
    assert_eq!(cfg.network_spec(&data).unwrap(), spec);
}
