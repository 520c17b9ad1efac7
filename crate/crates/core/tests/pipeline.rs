//! Cross-module pipeline tests: scenario wiring, data-flow guards and the
//! training-loop contracts that only show up end to end.

use std::collections::BTreeSet;

use cfsm::config::ExperimentConfig;
use cfsm::data::{digits, kshot_sample, write_idx, BatchScheduler, Dataset, Domain, StreamMode, TargetLabelRule};
use cfsm::numerics::Matrix;
use cfsm::rng::stream_rng;
use cfsm::runner::{run_eval, run_train};

fn run(value: serde_json::Value) -> (cfsm::runner::TrainArtifacts, tempfile::TempDir) {
    let mut config: ExperimentConfig = serde_json::from_value(value).unwrap();
    let dir = tempfile::tempdir().unwrap();
    config.output_dir = Some(dir.path().join("run"));
    let artifacts = run_train(&config, None).unwrap();
    (artifacts, dir)
}

fn synth_value(variant: &str, seed: u64) -> serde_json::Value {
    serde_json::json!({
        "scenario": {"kind": "unsup_dlstl"},
        "variant": variant,
        "arch": {"hidden": [16], "feat_dim": 8, "cfs_dim": 5},
        "weights": {"beta_c": 1.0, "beta_m": 1e-8},
        "optimizer": {"kind": "adam", "learning_rate": 0.005, "epochs": 4,
                      "pretrain_epochs": 2, "batch_size": 8, "warmup_steps": 5},
        "graph": {"k": 2, "bandwidth": "median", "normalized": false},
        "data": {"kind": "synth_two_domain",
            "spec": {"factors": 5, "source_classes": 3, "target_classes": 3,
                     "samples_per_class": 24, "input_dim": 12, "noise": 0.1, "distortion": 0.4},
            "eval_per_class": 8},
        "seed": seed
    })
}

#[test]
fn test_unsup_leakage_guard_poisoned_labels() {
    // Poisoning the hidden target labels must not change a single byte of
    // the metrics: no code path may feed them into training.
    let mut config: ExperimentConfig = serde_json::from_value(synth_value("cfsm", 5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    config.output_dir = Some(dir.path().join("a"));

    let data = cfsm::runner::prepare_data(&config).unwrap();
    let arch = cfsm::runner::build_arch(&config, &data).unwrap();
    let bundle = cfsm::runner::build_eval_bundle(&config, &data).unwrap();

    let train_with_target = |target: &Dataset| {
        let setup = cfsm::training::TrainSetup {
            scenario: config.scenario,
            variant: config.variant,
            arch: &arch,
            weights: cfsm::training::WeightsMode::Manual(cfsm::losses::LossWeights {
                beta_c: 1.0,
                beta_m: 1e-8,
                ..Default::default()
            }),
            optimizer: &config.optimizer,
            graph: &config.graph,
            source_train: &data.source_train,
            target_train: Some(target),
            kshot: None,
            eval: Some(&bundle),
            seed: config.seed,
        };
        let init = cfsm::model::ModelParams::init(&arch, &mut stream_rng(config.seed, "init")).unwrap();
        cfsm::training::train(&setup, init).unwrap()
    };

    let clean = train_with_target(&data.target_train);
    // Sentinel labels: every target train label replaced by a wrong one.
    let poisoned_labels: Vec<usize> = data.target_train.labels.iter().map(|_| 3).collect();
    let poisoned = Dataset::new(data.target_train.samples.clone(), poisoned_labels, Domain::Target).unwrap();
    let dirty = train_with_target(&poisoned);

    assert_eq!(clean.steps.len(), dirty.steps.len());
    for (a, b) in clean.steps.iter().zip(dirty.steps.iter()) {
        assert_eq!(
            serde_json::to_string(a).unwrap(),
            serde_json::to_string(b).unwrap(),
            "training metrics must not depend on hidden target labels"
        );
    }
    for ((_, ma), (_, mb)) in clean.params.entries().iter().zip(dirty.params.entries().iter()) {
        assert!(ma.bits_eq(mb));
    }
}

#[test]
fn test_pretrain_monotone_warmup_and_source_accuracy() {
    // On the separable synthetic source, the 20-step moving average of the
    // supervised loss is non-increasing across pretrain epochs, and the
    // pretrained model classifies its own source split well.
    let value = serde_json::json!({
        "scenario": {"kind": "unsup_dlstl"},
        "variant": "source_only",
        "arch": {"hidden": [24], "feat_dim": 12, "cfs_dim": 6},
        "weights": {"beta_c": 0.0, "beta_m": 0.0},
        "optimizer": {"kind": "adam", "learning_rate": 0.002, "epochs": 0,
                      "pretrain_epochs": 10, "batch_size": 16, "warmup_steps": 5},
        "graph": {"k": 2, "bandwidth": "median", "normalized": false},
        "data": {"kind": "synth_two_domain",
            "spec": {"factors": 5, "source_classes": 4, "target_classes": 4,
                     "samples_per_class": 60, "input_dim": 16, "noise": 0.05, "distortion": 0.3},
            "eval_per_class": 30},
        "seed": 11
    });
    let mut config: ExperimentConfig = serde_json::from_value(value).unwrap();
    let dir = tempfile::tempdir().unwrap();
    config.output_dir = Some(dir.path().join("run"));

    let data = cfsm::runner::prepare_data(&config).unwrap();
    let arch = cfsm::runner::build_arch(&config, &data).unwrap();
    let setup = cfsm::training::TrainSetup {
        scenario: config.scenario,
        variant: config.variant,
        arch: &arch,
        weights: cfsm::training::WeightsMode::Manual(Default::default()),
        optimizer: &config.optimizer,
        graph: &config.graph,
        source_train: &data.source_train,
        target_train: Some(&data.target_train),
        kshot: None,
        eval: None,
        seed: config.seed,
    };
    let init = cfsm::model::ModelParams::init(&arch, &mut stream_rng(config.seed, "init")).unwrap();
    let (params, steps, _) = cfsm::training::pretrain_source(&setup, init).unwrap();

    // Moving average of the last 20 supervised values at each epoch end.
    let sup: Vec<f64> = steps.iter().map(|s| s.losses.supervised.unwrap()).collect();
    let steps_per_epoch = steps.iter().filter(|s| s.epoch == 1).count();
    let mut averages = Vec::new();
    for epoch_end in (steps_per_epoch..=sup.len()).step_by(steps_per_epoch) {
        let lo = epoch_end.saturating_sub(20);
        let window = &sup[lo..epoch_end];
        averages.push(window.iter().sum::<f64>() / window.len() as f64);
    }
    for pair in averages.windows(2) {
        assert!(
            pair[1] <= pair[0] + 1e-9,
            "pretrain moving average increased: {averages:?}"
        );
    }

    // Separable-by-construction source: high train-split accuracy.
    let fwd = cfsm::model::forward_values(&params, &data.source_train.samples).unwrap();
    let map = cfsm::data::ClassMap::from_label_space(&data.source_train.label_space);
    let labels = map.remap(&data.source_train.labels).unwrap();
    let acc = cfsm::eval::classification_accuracy(&fwd.source_logits, &labels).unwrap();
    assert!(acc >= 0.95, "source accuracy {acc}");
}

#[test]
fn test_kshot_exposure_bound_over_epochs() {
    // Over any number of batches, only the k-shot subset ever appears with a
    // visible label: exactly k * |classes| distinct rows.
    let labels: Vec<usize> = (0..60).map(|i| 5 + i % 3).collect();
    let samples = Matrix::from_vec(60, 2, (0..120).map(|v| v as f64).collect()).unwrap();
    let target = Dataset::new(samples, labels, Domain::Target).unwrap();
    let source = Dataset::new(Matrix::zeros(20, 2), vec![0; 20], Domain::Source).unwrap();
    let kshot = kshot_sample(&target, 4, &mut stream_rng(3, "kshot")).unwrap();
    assert_eq!(kshot.len(), 12);

    let mut sched = BatchScheduler::new(
        StreamMode::Joint,
        10,
        &source,
        Some(&target),
        Some(&kshot),
        TargetLabelRule::Subset(kshot.clone()),
        stream_rng(3, "s"),
        stream_rng(3, "t"),
    )
    .unwrap();
    let mut labelled_values = BTreeSet::new();
    for _ in 0..100 {
        let batch = sched.next_batch().unwrap();
        for i in batch.labelled_rows_in_domain(Domain::Target) {
            // Identify the row by its first feature value (they are unique).
            labelled_values.insert(batch.x.get(i, 0).to_bits());
        }
    }
    assert_eq!(labelled_values.len(), kshot.len());
}

#[test]
fn test_idx_config_end_to_end() {
    // Digits written to IDX files and trained through the idx data kind.
    let dir = tempfile::tempdir().unwrap();
    let all: Vec<usize> = (0..10).collect();
    let train = digits::generate(&all, 12, 0.2, digits::DigitStyle::Plain, 1, 7, "idx.train", Domain::Source).unwrap();
    let eval = digits::generate(&all, 6, 0.2, digits::DigitStyle::Plain, 1, 7, "idx.eval", Domain::Source).unwrap();
    let paths = [
        dir.path().join("train-images.idx"),
        dir.path().join("train-labels.idx"),
        dir.path().join("eval-images.idx"),
        dir.path().join("eval-labels.idx"),
    ];
    write_idx(&paths[0], &paths[1], &train.samples, &train.labels, 8, 8).unwrap();
    write_idx(&paths[2], &paths[3], &eval.samples, &eval.labels, 8, 8).unwrap();

    let value = serde_json::json!({
        "scenario": {"kind": "semi_dlstl", "k": 2},
        "variant": "cfsm",
        "arch": {"hidden": [16], "feat_dim": 8, "cfs_dim": 5},
        "weights": {"beta_c": 0.5, "beta_m": 1e-8},
        "optimizer": {"kind": "adam", "learning_rate": 0.004, "epochs": 2,
                      "pretrain_epochs": 1, "batch_size": 8, "warmup_steps": 5},
        "graph": {"k": 2, "bandwidth": "median", "normalized": false},
        "data": {"kind": "idx",
            "source": {"train_images": paths[0], "train_labels": paths[1],
                        "eval_images": paths[2], "eval_labels": paths[3]},
            "source_classes": [0, 1, 2, 3], "target_classes": [5, 6, 7]},
        "seed": 21
    });
    let (artifacts, _dir) = run(value);
    assert!(artifacts.final_epoch.accuracy.is_some());
    assert_eq!(artifacts.arch.input_dim, 64);
    assert_eq!(artifacts.arch.source_classes, 4);
    assert_eq!(artifacts.arch.target_classes, 3);
}

#[test]
fn test_csv_config_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = stream_rng(9, "csvgen");
    use rand::Rng;
    let mut lines = vec!["f0,f1,f2,label".to_string()];
    for i in 0..80 {
        let label = i % 4;
        let base = label as f64;
        lines.push(format!(
            "{},{},{},{}",
            base + rng.gen_range(-0.2..0.2),
            -base + rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.1..0.1),
            label
        ));
    }
    let train_path = dir.path().join("train.csv");
    std::fs::write(&train_path, lines.join("\n")).unwrap();

    let value = serde_json::json!({
        "scenario": {"kind": "unsup_dlstl"},
        "variant": "cfsm_minus_graph",
        "arch": {"hidden": [8], "feat_dim": 6, "cfs_dim": 4},
        "weights": {"beta_c": 0.5, "beta_m": 0.0},
        "optimizer": {"kind": "sgd", "learning_rate": 0.05, "epochs": 2,
                      "pretrain_epochs": 1, "batch_size": 6, "warmup_steps": 5},
        "graph": {"k": 2, "bandwidth": "median", "normalized": false},
        "data": {"kind": "csv",
            "source": {"train": train_path},
            "source_classes": [0, 1], "target_classes": [2, 3]},
        "seed": 13
    });
    let (artifacts, _dir) = run(value);
    assert!(artifacts.final_epoch.rank1.is_some());
    assert_eq!(artifacts.arch.input_dim, 3);
}

#[test]
fn test_uda_end_to_end_with_target_entropy() {
    let value = serde_json::json!({
        "scenario": {"kind": "uda"},
        "variant": "cfsm",
        "arch": {"hidden": [24], "feat_dim": 12, "cfs_dim": 6},
        "weights": {"beta_c": 0.3, "beta_m": 1e-8, "beta_target_entropy": 0.5},
        "optimizer": {"kind": "adam", "learning_rate": 0.002, "epochs": 3,
                      "pretrain_epochs": 2, "batch_size": 16, "warmup_steps": 5},
        "graph": {"k": 2, "bandwidth": "median", "normalized": false},
        "data": {"kind": "digits",
            "source_classes": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
            "target_classes": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
            "train_per_class": 20, "eval_per_class": 8,
            "noise": 0.15, "target_noise": 0.35},
        "seed": 17
    });
    let (artifacts, dir) = run(value);
    assert!(artifacts.final_epoch.accuracy.is_some());
    // Shared head: no separate target classifier in UDA.
    assert_eq!(artifacts.arch.target_classes, 0);
    let metrics = std::fs::read_to_string(dir.path().join("run").join("metrics.jsonl")).unwrap();
    let joint_lines: Vec<serde_json::Value> = metrics
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .filter(|v: &serde_json::Value| v["phase"] == "joint")
        .collect();
    assert!(!joint_lines.is_empty());
    for v in &joint_lines {
        assert!(v["losses"]["target_entropy"].is_f64());
    }
}

#[test]
fn test_joint_ft_baseline_terms() {
    let value = serde_json::json!({
        "scenario": {"kind": "uda"},
        "variant": "joint_ft",
        "arch": {"hidden": [16], "feat_dim": 8, "cfs_dim": 5},
        "weights": {"beta_c": 0.0, "beta_m": 0.0},
        "optimizer": {"kind": "adam", "learning_rate": 0.002, "epochs": 2,
                      "pretrain_epochs": 1, "batch_size": 8, "warmup_steps": 5},
        "graph": {"k": 2, "bandwidth": "median", "normalized": false},
        "data": {"kind": "digits",
            "source_classes": [0, 1, 2], "target_classes": [0, 1, 2],
            "train_per_class": 15, "eval_per_class": 5, "noise": 0.2},
        "seed": 19
    });
    let (_artifacts, dir) = run(value);
    let metrics = std::fs::read_to_string(dir.path().join("run").join("metrics.jsonl")).unwrap();
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["phase"] == "joint" {
            // Supervised + target entropy only: no CFS regularisers.
            assert!(v["losses"]["supervised"].is_f64());
            assert!(v["losses"]["target_entropy"].is_f64());
            assert!(v["losses"].get("factorisation").is_none());
            assert!(v["losses"].get("graph").is_none());
        }
    }
}

#[test]
fn test_cfsm_midmass_drops_vs_start_and_control() {
    // End-of-run target mid-mass sits below the start-of-run value, and the
    // beta_C = 0 control does not show the same drop.
    let (cfsm_run, dir) = run(synth_value("cfsm", 23));
    let epochs = std::fs::read_to_string(dir.path().join("run").join("epochs.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = epochs
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .filter(|v: &serde_json::Value| v["phase"] == "joint")
        .collect();
    let start = records.first().unwrap()["mid_mass"].as_f64().unwrap();
    let end = cfsm_run.final_epoch.mid_mass.unwrap();
    assert!(end < start, "mid-mass must drop: start {start}, end {end}");

    let mut control_value = synth_value("cfsm", 23);
    control_value["weights"]["beta_c"] = serde_json::json!(0.0);
    let (control_run, _dir2) = run(control_value);
    assert!(end < control_run.final_epoch.mid_mass.unwrap());
}

#[test]
fn test_cfsm_entropy_falls_well_below_its_start() {
    // The factorisation term at the end of CFSM training is under 20% of
    // its value at the first joint step; the beta_C = 0 control keeps the
    // raw term (still logged, zero-weighted) much higher.
    let read_fact = |dir: &std::path::Path| -> (f64, f64) {
        let metrics = std::fs::read_to_string(dir.join("run").join("metrics.jsonl")).unwrap();
        let joint: Vec<f64> = metrics
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
            .filter(|v| v["phase"] == "joint")
            .map(|v| v["losses"]["factorisation"].as_f64().unwrap())
            .collect();
        (joint[0], *joint.last().unwrap())
    };
    let mut value = synth_value("cfsm", 31);
    value["optimizer"]["epochs"] = serde_json::json!(10);
    let (_run, dir) = run(value.clone());
    let (first, last) = read_fact(dir.path());
    assert!(
        last < 0.2 * first,
        "entropy should collapse: first {first}, last {last}"
    );

    value["weights"]["beta_c"] = serde_json::json!(0.0);
    let (_control, control_dir) = run(value);
    let (c_first, c_last) = read_fact(control_dir.path());
    assert!(c_last > 0.2 * c_first, "control must not collapse: {c_first} -> {c_last}");
}

#[test]
fn test_semi_eval_reproduction_through_cli_surface() {
    // run_eval on the written checkpoint reproduces the final epoch metric.
    let value = serde_json::json!({
        "scenario": {"kind": "semi_dlstl", "k": 3},
        "variant": "cfsm",
        "arch": {"hidden": [16], "feat_dim": 8, "cfs_dim": 5},
        "weights": "auto",
        "optimizer": {"kind": "adam", "learning_rate": 0.003, "epochs": 3,
                      "pretrain_epochs": 1, "batch_size": 8, "warmup_steps": 6},
        "graph": {"k": 2, "bandwidth": "median", "normalized": false},
        "data": {"kind": "synth_two_domain",
            "spec": {"factors": 5, "source_classes": 3, "target_classes": 3,
                     "samples_per_class": 20, "input_dim": 12, "noise": 0.1, "distortion": 0.4},
            "eval_per_class": 10},
        "seed": 29
    });
    let mut config: ExperimentConfig = serde_json::from_value(value).unwrap();
    let dir = tempfile::tempdir().unwrap();
    config.output_dir = Some(dir.path().join("run"));
    let artifacts = run_train(&config, None).unwrap();
    let metrics = run_eval(&config, &artifacts.out_dir.join("checkpoint.json"), None).unwrap();
    let diff = (metrics["accuracy"].as_f64().unwrap() - artifacts.final_epoch.accuracy.unwrap()).abs();
    assert!(diff < 1e-12);
}
