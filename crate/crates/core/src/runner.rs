//! Config-driven orchestration: data preparation, the pretrain/train stages,
//! evaluation, and every artifact the CLI leaves on disk (manifest, metrics
//! logs, checkpoints, histogram and top-k CSVs).

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::{CsvPaths, DataConfig, ExperimentConfig, IdxPaths, WeightsConfig};
use crate::data::{
    digits, kshot_sample, load_csv, load_idx, ClassMap, Dataset, Domain, SynthWorld,
};
use crate::error::{Error, Result};
use crate::eval::{activation_histogram, classification_accuracy, retrieval_metrics, top_k_by_factor};
use crate::losses::LossWeights;
use crate::model::{forward_values, load_checkpoint, save_checkpoint, ArchSpec, ModelParams};
use crate::rng::stream_rng;
use crate::scenario::{EvalMode, Scenario};
use crate::training::{
    pretrain_source, train, EpochRecord, EvalBundle, EvalTask, StepRecord, TrainOutcome, TrainSetup,
    WeightsMode,
};

pub struct PreparedData {
    pub source_train: Dataset,
    pub target_train: Dataset,
    pub source_eval: Dataset,
    pub target_eval: Dataset,
}

impl PreparedData {
    pub fn input_dim(&self) -> usize {
        self.source_train.input_dim()
    }
}

fn load_idx_domain(paths: &IdxPaths, domain: Domain) -> Result<(Dataset, Dataset)> {
    let train = load_idx(&paths.train_images, &paths.train_labels, domain)?;
    let eval = match (&paths.eval_images, &paths.eval_labels) {
        (Some(ei), Some(el)) => load_idx(ei, el, domain)?,
        (None, None) => {
            eprintln!("warning: no eval files for {domain:?}; evaluating on the training pool");
            train.clone()
        }
        _ => {
            return Err(Error::Config(
                "eval_images and eval_labels must be given together".into(),
            ))
        }
    };
    Ok((train, eval))
}

fn load_csv_domain(paths: &CsvPaths, domain: Domain) -> Result<(Dataset, Dataset)> {
    let train = load_csv(&paths.train, domain)?;
    let eval = match &paths.eval {
        Some(p) => load_csv(p, domain)?,
        None => {
            eprintln!("warning: no eval file for {domain:?}; evaluating on the training pool");
            train.clone()
        }
    };
    Ok((train, eval))
}

/// Materialise the datasets a config describes. Everything is deterministic
/// in the config seed.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let seed = config.seed;
    let data = match &config.data {
        DataConfig::SynthTwoDomain { spec, eval_per_class } => {
            let world = SynthWorld::new(spec, seed)?;
            let (source_train, target_train) = world.sample_pair(spec.samples_per_class, seed, "train")?;
            let (source_eval, target_eval) = world.sample_pair(*eval_per_class, seed, "eval")?;
            PreparedData {
                source_train,
                target_train,
                source_eval,
                target_eval,
            }
        }
        DataConfig::Digits {
            source_classes,
            target_classes,
            train_per_class,
            eval_per_class,
            noise,
            target_noise,
            target_style,
            shift,
        } => {
            let t_noise = target_noise.unwrap_or(*noise);
            let plain = digits::DigitStyle::Plain;
            PreparedData {
                source_train: digits::generate(source_classes, *train_per_class, *noise, plain, *shift, seed, "source.train", Domain::Source)?,
                target_train: digits::generate(target_classes, *train_per_class, t_noise, *target_style, *shift, seed, "target.train", Domain::Target)?,
                source_eval: digits::generate(source_classes, *eval_per_class, *noise, plain, *shift, seed, "source.eval", Domain::Source)?,
                target_eval: digits::generate(target_classes, *eval_per_class, t_noise, *target_style, *shift, seed, "target.eval", Domain::Target)?,
            }
        }
        DataConfig::Idx {
            source,
            target,
            source_classes,
            target_classes,
        } => {
            let src_set: BTreeSet<usize> = source_classes.iter().copied().collect();
            let tgt_set: BTreeSet<usize> = target_classes.iter().copied().collect();
            let (src_train_pool, src_eval_pool) = load_idx_domain(source, Domain::Source)?;
            let (tgt_train_pool, tgt_eval_pool) = match target {
                Some(t) => load_idx_domain(t, Domain::Target)?,
                None => (src_train_pool.clone(), src_eval_pool.clone()),
            };
            PreparedData {
                source_train: src_train_pool.filter_classes(&src_set, Domain::Source)?,
                target_train: tgt_train_pool.filter_classes(&tgt_set, Domain::Target)?,
                source_eval: src_eval_pool.filter_classes(&src_set, Domain::Source)?,
                target_eval: tgt_eval_pool.filter_classes(&tgt_set, Domain::Target)?,
            }
        }
        DataConfig::Csv {
            source,
            target,
            source_classes,
            target_classes,
        } => {
            let src_set: BTreeSet<usize> = source_classes.iter().copied().collect();
            let tgt_set: BTreeSet<usize> = target_classes.iter().copied().collect();
            let (src_train_pool, src_eval_pool) = load_csv_domain(source, Domain::Source)?;
            let (tgt_train_pool, tgt_eval_pool) = match target {
                Some(t) => load_csv_domain(t, Domain::Target)?,
                None => (src_train_pool.clone(), src_eval_pool.clone()),
            };
            PreparedData {
                source_train: src_train_pool.filter_classes(&src_set, Domain::Source)?,
                target_train: tgt_train_pool.filter_classes(&tgt_set, Domain::Target)?,
                source_eval: src_eval_pool.filter_classes(&src_set, Domain::Source)?,
                target_eval: tgt_eval_pool.filter_classes(&tgt_set, Domain::Target)?,
            }
        }
    };

    if data.source_train.is_empty() {
        return Err(Error::Data("source training split is empty".into()));
    }
    if data.target_train.is_empty() {
        return Err(Error::Data("target training split is empty".into()));
    }
    for (name, ds) in [
        ("target_train", &data.target_train),
        ("source_eval", &data.source_eval),
        ("target_eval", &data.target_eval),
    ] {
        if ds.input_dim() != data.source_train.input_dim() {
            return Err(Error::dimension(
                "prepare_data",
                format!("source_train dim {}", data.source_train.input_dim()),
                format!("{name} dim {}", ds.input_dim()),
            ));
        }
    }
    // Disjointness is asserted on the materialised label spaces, not just
    // the configured class lists.
    if config.scenario.requires_disjoint()
        && !data.source_train.label_space.is_disjoint(&data.target_train.label_space)
    {
        return Err(Error::Config("materialised label spaces overlap in a DLSTL scenario".into()));
    }
    Ok(data)
}

/// Assemble the full architecture from the config plus the loaded data.
pub fn build_arch(config: &ExperimentConfig, data: &PreparedData) -> Result<ArchSpec> {
    let input_dim = match config.arch.input_dim {
        Some(d) => {
            if d != data.input_dim() {
                return Err(Error::dimension(
                    "build_arch",
                    format!("config input_dim {d}"),
                    format!("data dim {}", data.input_dim()),
                ));
            }
            d
        }
        None => data.input_dim(),
    };
    let arch = ArchSpec {
        input_dim,
        hidden: config.arch.hidden.clone(),
        feat_dim: config.arch.feat_dim,
        cfs_dim: config.arch.cfs_dim,
        source_classes: data.source_train.label_space.len(),
        target_classes: if config.scenario.has_target_head() {
            data.target_train.label_space.len()
        } else {
            0
        },
        ae_decoder: config.variant.needs_ae_decoder(),
    };
    arch.validate()?;
    Ok(arch)
}

/// Query/gallery split of a labelled pool: per class, alternating positions
/// go to the query and gallery sides.
pub fn retrieval_split(pool: &Dataset) -> Result<(crate::numerics::Matrix, Vec<usize>, crate::numerics::Matrix, Vec<usize>)> {
    let mut query_rows = Vec::new();
    let mut gallery_rows = Vec::new();
    for class in &pool.label_space {
        let members: Vec<usize> = (0..pool.len()).filter(|&i| pool.labels[i] == *class).collect();
        if members.len() < 2 {
            return Err(Error::Data(format!(
                "retrieval evaluation needs >= 2 samples of class {class}, found {}",
                members.len()
            )));
        }
        for (pos, &i) in members.iter().enumerate() {
            if pos % 2 == 0 {
                query_rows.push(i);
            } else {
                gallery_rows.push(i);
            }
        }
    }
    let dim = pool.input_dim();
    let take = |rows: &[usize]| {
        let mut x = crate::numerics::Matrix::zeros(rows.len(), dim);
        let mut ids = Vec::with_capacity(rows.len());
        for (r, &i) in rows.iter().enumerate() {
            for c in 0..dim {
                x.set(r, c, pool.samples.get(i, c));
            }
            ids.push(pool.labels[i]);
        }
        (x, ids)
    };
    let (qx, qids) = take(&query_rows);
    let (gx, gids) = take(&gallery_rows);
    Ok((qx, qids, gx, gids))
}

/// Per-epoch evaluation bundle for the scenario.
pub fn build_eval_bundle(config: &ExperimentConfig, data: &PreparedData) -> Result<EvalBundle> {
    let task = match config.scenario.eval_mode() {
        EvalMode::Classification => {
            let (map, use_target_head) = match config.scenario {
                Scenario::Uda => (ClassMap::from_label_space(&data.source_train.label_space), false),
                Scenario::SemiDlstl { .. } => {
                    (ClassMap::from_label_space(&data.target_train.label_space), true)
                }
                Scenario::UnsupDlstl => unreachable!(),
            };
            EvalTask::Classification {
                x: data.target_eval.samples.clone(),
                labels: map.remap(&data.target_eval.labels)?,
                use_target_head,
            }
        }
        EvalMode::Retrieval => {
            let (query_x, query_ids, gallery_x, gallery_ids) = retrieval_split(&data.target_eval)?;
            EvalTask::Retrieval {
                query_x,
                query_ids,
                gallery_x,
                gallery_ids,
            }
        }
    };
    Ok(EvalBundle {
        task,
        target_pool: Some(data.target_train.samples.clone()),
    })
}

fn weights_mode(config: &ExperimentConfig) -> WeightsMode {
    match &config.weights {
        WeightsConfig::Auto(_) => WeightsMode::Auto {
            base: LossWeights::default(),
        },
        WeightsConfig::Manual(w) => WeightsMode::Manual(w.clone()),
    }
}

fn build_setup<'a>(
    config: &'a ExperimentConfig,
    data: &'a PreparedData,
    arch: &'a ArchSpec,
    eval: Option<&'a EvalBundle>,
) -> Result<TrainSetup<'a>> {
    let kshot = match config.scenario {
        Scenario::SemiDlstl { k } => Some(kshot_sample(
            &data.target_train,
            k,
            &mut stream_rng(config.seed, "kshot"),
        )?),
        _ => None,
    };
    Ok(TrainSetup {
        scenario: config.scenario,
        variant: config.variant,
        arch,
        weights: weights_mode(config),
        optimizer: &config.optimizer,
        graph: &config.graph,
        source_train: &data.source_train,
        target_train: Some(&data.target_train),
        kshot,
        eval,
        seed: config.seed,
    })
}

pub struct TrainArtifacts {
    pub out_dir: PathBuf,
    pub final_epoch: EpochRecord,
    pub weights: LossWeights,
    pub params: ModelParams,
    pub arch: ArchSpec,
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_manifest(out: &Path, config: &ExperimentConfig) -> Result<()> {
    let manifest = serde_json::json!({
        "code_version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "config": config,
    });
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Histogram CSV of the target-pool CFS activations plus the top-k CSV over
/// the combined pools.
fn write_diagnostics(out: &Path, params: &ModelParams, data: &PreparedData, top_k: usize) -> Result<()> {
    let target_fc = forward_values(params, &data.target_train.samples)?.cfs;
    let hist = activation_histogram(&target_fc, 20)?;
    let mut csv = String::from("bin_low,bin_high,count\n");
    for (b, count) in hist.counts.iter().enumerate() {
        csv.push_str(&format!("{},{},{}\n", hist.edges[b], hist.edges[b + 1], count));
    }
    std::fs::write(out.join("histogram.csv"), csv)?;

    // Combined pool: source rows first, then target rows.
    let dim = data.input_dim();
    let n = data.source_train.len() + data.target_train.len();
    let mut combined = crate::numerics::Matrix::zeros(n, dim);
    let mut domains = Vec::with_capacity(n);
    for i in 0..data.source_train.len() {
        for c in 0..dim {
            combined.set(i, c, data.source_train.samples.get(i, c));
        }
        domains.push(Domain::Source);
    }
    for i in 0..data.target_train.len() {
        let r = data.source_train.len() + i;
        for c in 0..dim {
            combined.set(r, c, data.target_train.samples.get(i, c));
        }
        domains.push(Domain::Target);
    }
    let fc = forward_values(params, &combined)?.cfs;
    let k = top_k.min(n);
    let top = top_k_by_factor(&fc, &domains, k)?;
    let mut csv = String::from("factor,rank,index,domain,activation\n");
    for (factor, entries) in top.iter().enumerate() {
        for (rank, e) in entries.iter().enumerate() {
            let domain = match e.domain {
                Domain::Source => "source",
                Domain::Target => "target",
            };
            csv.push_str(&format!("{},{},{},{},{}\n", factor, rank + 1, e.index, domain, e.activation));
        }
    }
    std::fs::write(out.join("topk.csv"), csv)?;
    Ok(())
}

fn resolve_out_dir(config: &ExperimentConfig, out_override: Option<&Path>) -> Result<PathBuf> {
    match out_override {
        Some(p) => Ok(p.to_path_buf()),
        None => config
            .output_dir
            .clone()
            .ok_or_else(|| Error::Config("no output directory: set output_dir in the config or pass --out".into())),
    }
}

/// The full pipeline behind `cfsm train`: pretrain (when the variant wants
/// it), joint training, and all artifacts.
pub fn run_train(config: &ExperimentConfig, out_override: Option<&Path>) -> Result<TrainArtifacts> {
    config.validate()?;
    let out = resolve_out_dir(config, out_override)?;
    std::fs::create_dir_all(&out)?;
    let data = prepare_data(config)?;
    let arch = build_arch(config, &data)?;
    let eval = build_eval_bundle(config, &data)?;
    write_manifest(&out, config)?;

    let init = ModelParams::init(&arch, &mut stream_rng(config.seed, "init"))?;
    let setup = build_setup(config, &data, &arch, Some(&eval))?;

    let mut all_steps: Vec<StepRecord> = Vec::new();
    let mut all_epochs: Vec<EpochRecord> = Vec::new();
    let start = if config.variant.needs_pretrain() && config.optimizer.pretrain_epochs > 0 {
        let (pre_params, pre_steps, pre_epochs) = pretrain_source(&setup, init)?;
        save_checkpoint(&out.join("pretrain_checkpoint.json"), &arch, &pre_params)?;
        all_steps.extend(pre_steps);
        all_epochs.extend(pre_epochs);
        pre_params
    } else {
        init
    };

    let outcome: TrainOutcome = train(&setup, start)?;
    all_steps.extend(outcome.steps);
    all_epochs.extend(outcome.epochs);

    write_jsonl(&out.join("metrics.jsonl"), &all_steps)?;
    write_jsonl(&out.join("epochs.jsonl"), &all_epochs)?;
    save_checkpoint(&out.join("checkpoint.json"), &arch, &outcome.params)?;
    write_diagnostics(&out, &outcome.params, &data, 10)?;

    let final_epoch = all_epochs
        .last()
        .cloned()
        .ok_or_else(|| Error::Contract("training produced no epoch records".into()))?;
    Ok(TrainArtifacts {
        out_dir: out,
        final_epoch,
        weights: outcome.weights,
        params: outcome.params,
        arch,
    })
}

/// The pipeline behind `cfsm pretrain`: source-only supervised training plus
/// a checkpoint.
pub fn run_pretrain(config: &ExperimentConfig, out_override: Option<&Path>) -> Result<TrainArtifacts> {
    config.validate()?;
    if config.optimizer.pretrain_epochs == 0 {
        return Err(Error::Config("pretrain requires optimizer.pretrain_epochs >= 1".into()));
    }
    let out = resolve_out_dir(config, out_override)?;
    std::fs::create_dir_all(&out)?;
    let data = prepare_data(config)?;
    let arch = build_arch(config, &data)?;
    let eval = build_eval_bundle(config, &data)?;
    write_manifest(&out, config)?;

    let init = ModelParams::init(&arch, &mut stream_rng(config.seed, "init"))?;
    let setup = build_setup(config, &data, &arch, Some(&eval))?;
    let (params, steps, epochs) = pretrain_source(&setup, init)?;

    write_jsonl(&out.join("metrics.jsonl"), &steps)?;
    write_jsonl(&out.join("epochs.jsonl"), &epochs)?;
    save_checkpoint(&out.join("checkpoint.json"), &arch, &params)?;
    write_diagnostics(&out, &params, &data, 10)?;

    let final_epoch = epochs.last().cloned().unwrap_or(EpochRecord {
        epoch: 0,
        phase: "pretrain",
        accuracy: None,
        rank1: None,
        map: None,
        mid_mass: None,
    });
    Ok(TrainArtifacts {
        out_dir: out,
        final_epoch,
        weights: LossWeights::default(),
        params,
        arch,
    })
}

/// The pipeline behind `cfsm eval`: metrics for a checkpoint on the config's
/// evaluation split.
pub fn run_eval(
    config: &ExperimentConfig,
    checkpoint: &Path,
    mode_override: Option<EvalMode>,
) -> Result<serde_json::Value> {
    config.validate()?;
    let data = prepare_data(config)?;
    let ckpt = load_checkpoint(checkpoint)?;
    if ckpt.arch.input_dim != data.input_dim() {
        return Err(Error::dimension(
            "run_eval",
            format!("checkpoint input_dim {}", ckpt.arch.input_dim),
            format!("data dim {}", data.input_dim()),
        ));
    }
    let mode = mode_override.unwrap_or_else(|| config.scenario.eval_mode());
    match mode {
        EvalMode::Classification => {
            let (map, use_target_head) = match config.scenario {
                Scenario::SemiDlstl { .. } => {
                    (ClassMap::from_label_space(&data.target_train.label_space), true)
                }
                _ => (ClassMap::from_label_space(&data.source_train.label_space), false),
            };
            let fwd = forward_values(&ckpt.params, &data.target_eval.samples)?;
            let logits = if use_target_head {
                fwd.target_logits.ok_or_else(|| {
                    Error::Config("checkpoint has no target head for classification eval".into())
                })?
            } else {
                fwd.source_logits
            };
            let labels = map.remap(&data.target_eval.labels)?;
            let accuracy = classification_accuracy(&logits, &labels)?;
            Ok(serde_json::json!({
                "mode": "classification",
                "accuracy": accuracy,
                "num_samples": labels.len(),
            }))
        }
        EvalMode::Retrieval => {
            let (qx, qids, gx, gids) = retrieval_split(&data.target_eval)?;
            let qf = forward_values(&ckpt.params, &qx)?.features;
            let gf = forward_values(&ckpt.params, &gx)?.features;
            let r = retrieval_metrics(&qf, &qids, &gf, &gids)?;
            Ok(serde_json::json!({
                "mode": "retrieval",
                "rank1": r.rank1,
                "map": r.map,
                "num_queries": qids.len(),
            }))
        }
    }
}

/// The pipeline behind `cfsm inspect`: diagnostics CSVs for a checkpoint.
pub fn run_inspect(config: &ExperimentConfig, checkpoint: &Path, out_override: Option<&Path>) -> Result<PathBuf> {
    config.validate()?;
    let out = resolve_out_dir(config, out_override)?;
    std::fs::create_dir_all(&out)?;
    let data = prepare_data(config)?;
    let ckpt = load_checkpoint(checkpoint)?;
    if ckpt.arch.input_dim != data.input_dim() {
        return Err(Error::dimension(
            "run_inspect",
            format!("checkpoint input_dim {}", ckpt.arch.input_dim),
            format!("data dim {}", data.input_dim()),
        ));
    }
    write_diagnostics(&out, &ckpt.params, &data, 10)?;
    Ok(out)
}
