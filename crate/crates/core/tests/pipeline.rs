use std::path::{Path, PathBuf};
use std::process::Command;

use pslora::analysis::{eval_subset, sign_split, subset_model, SubsetVariant};
use pslora::commands::{
    cmd_analyze, cmd_eval, cmd_merge, cmd_metrics, cmd_pretrain, cmd_train, Analysis, ACC_MATRIX_FILE,
};
use pslora::config::{ExperimentConfig, MergeCadence};
use pslora::data::{make_sequence, pretrain_mixture, SequenceSpec};
use pslora::metrics::FrMode;
use pslora::trainer::{evaluate, pretrain_base, run_sequence, PretrainConfig};
use pslora::{Error, HistoryMode, MergeStrategy, TrainConfig};

fn config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        out_dir: dir.to_path_buf(),
        ..Default::default()
    }
}

#[test]
fn full_pipeline_through_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let pre = cmd_pretrain(&cfg).unwrap();
    assert!(pre.base_accuracy >= 0.8, "base accuracy {}", pre.base_accuracy);

    let train = cmd_train(&cfg).unwrap();
    assert_eq!(train.opposite_fraction.len(), 4);
    assert!(train.outputs.iter().all(|p| p.is_file()));

    let mut sums = Vec::new();
    for s in [MergeStrategy::MagnitudeMax, MergeStrategy::Average, MergeStrategy::Ties] {
        let c = ExperimentConfig {
            merge_strategy: Some(s),
            ..cfg.clone()
        };
        let r = cmd_merge(&c, None).unwrap();
        if s == MergeStrategy::MagnitudeMax {
            for layer in r.selection.as_ref().unwrap() {
                assert!((layer.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let eval = cmd_eval(&c, None).unwrap();
            assert!((eval.acc - train.final_acc).abs() < 1e-12);
        } else {
            assert!(r.selection.is_none());
        }
        sums.push(r.checksum);
    }
    sums.sort();
    sums.dedup();
    assert_eq!(sums.len(), 3);

    let m = cmd_metrics(&cfg, &[], FrMode::Peak).unwrap();
    assert_eq!(m.acc.map(pslora::config::r6), Some(pslora::config::r6(train.final_acc)));
    assert!(m.per_order_std.is_none());
    let m2 = cmd_metrics(
        &cfg,
        &[dir.path().join(ACC_MATRIX_FILE), dir.path().join(ACC_MATRIX_FILE)],
        FrMode::Peak,
    )
    .unwrap();
    assert_eq!(m2.per_order_std.unwrap().acc, Some(0.0));

    for which in [Analysis::SignSplit, Analysis::ShiftHist, Analysis::Similarity] {
        let v = cmd_analyze(&cfg, which, None).unwrap();
        assert!(dir.path().join(format!("{}.json", which.name())).is_file(), "{v}");
    }
    let csv = std::fs::read_to_string(dir.path().join("sign_split.csv")).unwrap();
    assert!(csv.starts_with("task,k_percent,same_fraction,opposite_fraction"));
}

#[test]
fn stages_list_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    match cmd_merge(&cfg, None) {
        Err(Error::MissingInputs(paths)) => assert_eq!(paths.len(), 2),
        other => panic!("{other:?}"),
    }
    assert!(matches!(cmd_train(&cfg), Err(Error::MissingInputs(_))));
    assert!(matches!(cmd_eval(&cfg, None), Err(Error::MissingInputs(_))));
    let ghost = PathBuf::from("/nonexistent/a.json");
    match cmd_metrics(&cfg, std::slice::from_ref(&ghost), FrMode::Peak) {
        Err(Error::MissingInputs(paths)) => assert_eq!(paths, vec![ghost]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn metrics_of_a_hand_written_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    std::fs::write(
        &path,
        r#"{"n_tasks": 2, "sizes": [100, 300],
            "entries": [{"i":1,"j":1,"acc":0.9},{"i":1,"j":2,"acc":0.8},{"i":2,"j":1,"acc":0.5},{"i":2,"j":2,"acc":0.6}],
            "scratch": [0.9, 0.6]}"#,
    )
    .unwrap();
    let r = cmd_metrics(&config(dir.path()), &[path], FrMode::Peak).unwrap();
    assert!((r.acc.unwrap() - 0.65).abs() < 1e-12);
    assert!((r.bwt.unwrap() + 0.1).abs() < 1e-12);
    assert!((r.fwt.unwrap() + 0.1).abs() < 1e-12);
    assert!((r.fr.unwrap() - 0.1).abs() < 1e-12);
    assert!((r.aaa.unwrap() - (0.9 + 0.7) / 2.0).abs() < 1e-12);
}

#[test]
fn per_task_cadence_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        merge_cadence: MergeCadence::PerTask,
        ..config(dir.path())
    };
    cmd_pretrain(&cfg).unwrap();
    let r = cmd_train(&cfg).unwrap();
    assert!((r.final_acc - r.unmerged_final_acc).abs() < 1e-12);
}

#[test]
fn binary_dry_run_prints_resolved_config() {
    let out = Command::new(env!("CARGO_BIN_EXE_pslora"))
        .args([
            "--dry-run",
            "--lambda",
            "0.5",
            "--merge-strategy",
            "none",
            "--order",
            "4,3,2,1",
            "train",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = ExperimentConfig::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.lambda, 0.5);
    assert_eq!(cfg.merge_strategy, None);
    assert_eq!(cfg.order, vec![4, 3, 2, 1]);

    let bad = Command::new(env!("CARGO_BIN_EXE_pslora"))
        .args(["--order", "1,1,2,3", "--dry-run", "train"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("error"));
}

#[test]
fn binary_reports_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pslora"))
        .args(["--out", dir.path().to_str().unwrap(), "merge"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("base.pslw") && err.contains("adapters.pslr"), "{err}");
}

#[test]
fn training_behaviour_on_the_fixture() {
    let spec = SequenceSpec::drop_fixture(0);
    let tasks = make_sequence(&spec).unwrap();
    let (base, _) = pretrain_base(
        &pretrain_mixture(&spec).unwrap(),
        spec.d_in,
        spec.n_classes,
        &PretrainConfig::default(),
    )
    .unwrap();

    let single = pslora::data::TaskSequence {
        tasks: vec![tasks.tasks[0].clone()],
    };
    let one = run_sequence(&base, &single, &TrainConfig::default(), HistoryMode::Sum).unwrap();
    assert!(one.acc_matrix.get(0, 0).unwrap() > 0.9);

    let mut plain = TrainConfig::default();
    plain.reg.lambda = 0.0;
    let inc = run_sequence(&base, &tasks, &plain, HistoryMode::Sum).unwrap();
    // The 120 degree task overwrites task 1 without the stability term.
    assert!(inc.acc_matrix.get(0, 3).unwrap() < inc.acc_matrix.get(0, 2).unwrap());

    let ps = run_sequence(&base, &tasks, &TrainConfig::default(), HistoryMode::Sum).unwrap();
    assert!(ps.sign_stats[3].opposite_fraction < inc.sign_stats[3].opposite_fraction);

    // Keeping every entry of the new update reproduces the unmasked model exactly.
    let n = tasks.len();
    let deltas: Vec<Vec<_>> = ps
        .adapters
        .iter()
        .map(|t| t.iter().map(|a| a.delta()).collect())
        .collect();
    let frozen: Vec<_> = (0..2)
        .map(|l| {
            deltas[..n - 1].iter().fold(
                pslora::Matrix::zeros(deltas[0][l].rows(), deltas[0][l].cols()),
                |acc, d| acc.add(&d[l]).unwrap(),
            )
        })
        .collect();
    let splits: Vec<_> = (0..2)
        .map(|l| sign_split(&deltas[n - 1][l], &frozen[l], 100.0).unwrap())
        .collect();
    let probes: Vec<_> = tasks.tasks.iter().map(|t| &t.test).collect();
    let both = eval_subset(&base, &frozen, &deltas[n - 1], &splits, SubsetVariant::Both, &probes).unwrap();
    let full = subset_model(&base, &frozen, &deltas[n - 1], &splits, SubsetVariant::Both).unwrap();
    let eff = ps.model.effective().unwrap();
    let direct: f64 = probes.iter().map(|p| evaluate(&eff, p).unwrap()).sum::<f64>() / probes.len() as f64;
    let via: f64 = probes.iter().map(|p| evaluate(&full, p).unwrap()).sum::<f64>() / probes.len() as f64;
    assert_eq!(both, via);
    assert!((both - direct).abs() < 1e-9, "{both} vs {direct}");
}
