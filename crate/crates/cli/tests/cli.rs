use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sparsenet_core::harness::experiment::{
    DataSource, DataSpec, GridExperiment, ImpExperiment, ModelSpec, NoiseArm, NoiseSpec, TrainExperiment,
};
use sparsenet_core::harness::{read_events, Event, Experiment, ExperimentConfig, GridSpec, TrainConfig};
use sparsenet_core::{PresetOptions, PruneSchedule, SparsityMask};

fn sparsenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsenet"))
        .args(args)
        .env("SPARSENET_DATA", "/nonexistent")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn toy_data() -> DataSpec {
    DataSpec {
        source: DataSource::Toy { classes: 4, train: 240, test: 120 },
        train_subset: Some(160),
        val_size: 40,
        test_subset: None,
        seed: 3,
    }
}

fn toy_imp() -> Experiment {
    Experiment {
        seeds: vec![0, 1],
        experiment: ExperimentConfig::Imp(ImpExperiment {
            data: toy_data(),
            model: ModelSpec::Fc { hidden: vec![12], options: PresetOptions::default() },
            train: TrainConfig::adam(2, 20, 1e-2, 1e-4),
            schedule: PruneSchedule { target_remaining: 0.6, ..PruneSchedule::default() },
            random_control: true,
            noise: Some(NoiseSpec {
                p_values: vec![0.0, 0.2, 0.4],
                mode: Default::default(),
                seed: 0,
                arms: vec![
                    NoiseArm { label: "dense".into(), arm: "magnitude".into(), density: 1.0 },
                    NoiseArm { label: "w60".into(), arm: "magnitude".into(), density: 0.6 },
                ],
            }),
        }),
    }
}

fn write_config(dir: &Path, name: &str, exp: &Experiment) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(exp).unwrap()).unwrap();
    path
}

fn artifact(log: &Path) -> String {
    match read_events(log).unwrap().last() {
        Some(Event::End { artifact_hash, .. }) => artifact_hash.clone(),
        other => panic!("log does not end with an end event: {other:?}"),
    }
}

#[test]
fn toy_train_replays_from_its_log() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let second = dir.path().join("b");
    ok(&sparsenet(&["train", "--toy", "--out", first.to_str().unwrap()]));
    let log = first.join("run.jsonl");
    ok(&sparsenet(&["train", "--config", log.to_str().unwrap(), "--out", second.to_str().unwrap()]));
    assert_eq!(artifact(&log), artifact(&second.join("run.jsonl")));
}

#[test]
fn noise_eval_writes_masks_curves_and_plotdata() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "imp.json", &toy_imp());
    let out = dir.path().join("run");
    ok(&sparsenet(&["noise-eval", "--config", config.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()]));

    let mask_dir = out.join("masks").join("magnitude").join("seed7");
    let bin = std::fs::read(mask_dir.join("round000.spmk")).unwrap();
    let mask = SparsityMask::read_binary(&bin[..], "round000.spmk").unwrap();
    assert_eq!(mask.density(), 1.0);
    let last = std::fs::read(mask_dir.join("round004.spmk")).unwrap();
    let last = SparsityMask::read_binary(&last[..], "round004.spmk").unwrap();
    assert!(last.density() <= 0.6 && mask.is_superset_of(&last));
    assert!(out.join("masks").join("random").join("seed7").join("round004.json").is_file());

    let noise = std::fs::read_to_string(out.join("noise.csv")).unwrap();
    assert_eq!(noise.lines().count(), 1 + 2 * 3);
    assert!(noise.starts_with("model,p,accuracy,seed\n"));
    assert_eq!(noise.lines().filter(|l| l.starts_with("w60,")).count(), 3);

    let plots = dir.path().join("plots");
    ok(&sparsenet(&["plotdata", "--run", out.join("run.jsonl").to_str().unwrap(), "--out", plots.to_str().unwrap()]));
    for f in ["imp_accuracy.dat", "noise_accuracy.dat", "manifest.json"] {
        assert!(plots.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn grid_resume_skips_finished_points() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment {
        seeds: vec![0],
        experiment: ExperimentConfig::Grid(GridExperiment {
            grid: GridSpec {
                lr: vec![1e-3, 1e-2],
                batch_size: vec![20],
                weight_decay: vec![0.0],
                conv_activation_density: vec![1.0],
                ff_activation_density: vec![1.0],
                ff_weight_density: vec![1.0],
            },
            template: Box::new(ExperimentConfig::Train(TrainExperiment {
                data: toy_data(),
                model: ModelSpec::Fc { hidden: vec![8], options: PresetOptions::default() },
                train: TrainConfig::adam(1, 20, 1e-3, 0.0),
            })),
            workers: 2,
        }),
    };
    let config = write_config(dir.path(), "grid.json", &exp);
    let out = dir.path().join("grid");
    let args = ["grid", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    ok(&sparsenet(&args));
    let csv = std::fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let mut resumed = args.to_vec();
    resumed.push("--resume");
    let second = sparsenet(&resumed);
    ok(&second);
    assert!(String::from_utf8_lossy(&second.stdout).contains("resumed 2 points"));
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("ratio 6x does not match the claimed 12x"), "{report}");
    assert_eq!(std::fs::read_to_string(out.join("grid.csv")).unwrap(), csv);
}

#[test]
fn exit_codes_separate_config_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();

    let missing = sparsenet(&["imp", "--out", out]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("data fetch"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"seeds\": [0]}").unwrap();
    assert_eq!(sparsenet(&["train", "--config", bad.to_str().unwrap(), "--out", out]).status.code(), Some(2));

    let imp = write_config(dir.path(), "imp.json", &toy_imp());
    assert_eq!(sparsenet(&["train", "--config", imp.to_str().unwrap(), "--out", out]).status.code(), Some(2));
    assert_eq!(sparsenet(&["continual", "--arm", "cnn", "--out", out]).status.code(), Some(2));
    assert_eq!(sparsenet(&["grid", "--preset", "huge", "--out", out]).status.code(), Some(2));

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let fetch = ["data", "fetch", "--dataset", "mnist", "--dir", out, "--from", empty.to_str().unwrap()];
    assert_eq!(sparsenet(&fetch).status.code(), Some(3));
}

#[test]
fn fetch_imports_and_verifies_local_mnist() {
    let source = Path::new("/root/data/mnist/raw");
    if !source.join("train-images-idx3-ubyte").is_file() {
        eprintln!("skipping: no local MNIST copy");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    ok(&sparsenet(&[
        "data",
        "fetch",
        "--dataset",
        "mnist",
        "--dir",
        dir.path().to_str().unwrap(),
        "--from",
        source.to_str().unwrap(),
    ]));
    let sums: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("mnist").join("checksums.json")).unwrap()).unwrap();
    assert_eq!(
        sums["t10k-labels-idx1-ubyte"],
        "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"
    );
}
