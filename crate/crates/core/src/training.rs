//! Scenario-aware training: source pre-training, joint regularised training
//! with per-batch graphs, SGD/Adam updates and the auto-balance warm-up.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::data::{BatchScheduler, Dataset, StreamMode, TargetLabelRule};
use crate::error::{Error, Result};
use crate::eval::{classification_accuracy, mid_mass, retrieval_metrics};
use crate::graph::GraphConfig;
use crate::losses::{auto_balance, LossReport, LossWeights};
use crate::model::{forward_values, ArchSpec, ModelParams};
use crate::numerics::Matrix;
use crate::objective::{composite_objective, ObjectiveContext};
use crate::rng::stream_rng;
use crate::scenario::{Scenario, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default)]
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    /// Auto-balance warm-up window in steps.
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
}

fn default_warmup() -> usize {
    50
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch_size must be even for balanced joint batches, got {}",
                self.batch_size
            )));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Optimizer state. Adam moments are aligned with `ModelParams::entries`.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: usize,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ModelParams) -> Self {
        let shapes: Vec<(usize, usize)> = params.entries().iter().map(|(_, m)| m.shape()).collect();
        Optimizer {
            kind,
            lr,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    /// Apply one update. Gradients are aligned with the parameter entry
    /// order; a `None` gradient means the parameter was off the loss path
    /// this step and is treated as zero.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &[Option<Matrix>]) -> Result<()> {
        self.step += 1;
        let mut entries = params.entries_mut();
        if entries.len() != grads.len() {
            return Err(Error::Contract(format!(
                "gradient vector length {} does not match parameter count {}",
                grads.len(),
                entries.len()
            )));
        }
        for (idx, (name, value)) in entries.iter_mut().enumerate() {
            let zero;
            let grad = match &grads[idx] {
                Some(g) => g,
                None => {
                    zero = Matrix::zeros(value.rows(), value.cols());
                    &zero
                }
            };
            if !grad.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
            }
            if grad.shape() != value.shape() {
                return Err(Error::Contract(format!(
                    "gradient shape {} does not match parameter {name} {}",
                    grad.shape_string(),
                    value.shape_string()
                )));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in value.data_mut().iter_mut().zip(grad.data().iter()) {
                        *p -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
                    let m = &mut self.m[idx];
                    let v = &mut self.v[idx];
                    for ((p, g), (m_e, v_e)) in value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data().iter())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                    {
                        *m_e = ADAM_BETA1 * *m_e + (1.0 - ADAM_BETA1) * g;
                        *v_e = ADAM_BETA2 * *v_e + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *m_e / bc1;
                        let v_hat = *v_e / bc2;
                        *p -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
            if !value.all_finite() {
                return Err(Error::Numeric(format!("parameter {name} became non-finite after update")));
            }
        }
        Ok(())
    }
}

/// Manual weights are used as given; Auto runs the warm-up with unit betas
/// and then freezes the balanced values.
#[derive(Clone, Debug)]
pub enum WeightsMode {
    Manual(LossWeights),
    Auto { base: LossWeights },
}

/// Per-epoch evaluation task, prepared by the caller.
pub enum EvalTask {
    Classification {
        x: Matrix,
        labels: Vec<usize>,
        use_target_head: bool,
    },
    Retrieval {
        query_x: Matrix,
        query_ids: Vec<usize>,
        gallery_x: Matrix,
        gallery_ids: Vec<usize>,
    },
}

pub struct EvalBundle {
    pub task: EvalTask,
    /// Target pool inputs for the mid-mass diagnostic.
    pub target_pool: Option<Matrix>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: &'static str,
    pub losses: LossReport,
    pub beta_c: f64,
    pub beta_m: f64,
    pub lr: f64,
    pub source_rows: usize,
    pub target_rows: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mid_mass: Option<f64>,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// The weights in force at the end (after any auto-balance).
    pub weights: LossWeights,
}

pub struct TrainSetup<'a> {
    pub scenario: Scenario,
    pub variant: Variant,
    pub arch: &'a ArchSpec,
    pub weights: WeightsMode,
    pub optimizer: &'a OptimizerConfig,
    pub graph: &'a GraphConfig,
    pub source_train: &'a Dataset,
    pub target_train: Option<&'a Dataset>,
    pub kshot: Option<BTreeSet<usize>>,
    pub eval: Option<&'a EvalBundle>,
    pub seed: u64,
}

impl<'a> TrainSetup<'a> {
    fn scheduler(&self, mode: StreamMode, phase: &str) -> Result<BatchScheduler<'a>> {
        let rule = match (&self.scenario, &self.kshot) {
            (Scenario::SemiDlstl { .. }, Some(set)) => TargetLabelRule::Subset(set.clone()),
            (Scenario::SemiDlstl { .. }, None) => TargetLabelRule::Subset(BTreeSet::new()),
            _ => TargetLabelRule::Hidden,
        };
        BatchScheduler::new(
            mode,
            self.optimizer.batch_size,
            self.source_train,
            self.target_train,
            self.kshot.as_ref(),
            rule,
            stream_rng(self.seed, &format!("data.shuffle.source.{phase}")),
            stream_rng(self.seed, &format!("data.shuffle.target.{phase}")),
        )
    }
}

/// Supervised-only training on the source stream. Returns the initial
/// parameters untouched when `pretrain_epochs` is zero.
pub fn pretrain_source(setup: &TrainSetup, init: ModelParams) -> Result<(ModelParams, Vec<StepRecord>, Vec<EpochRecord>)> {
    let weights = match &setup.weights {
        WeightsMode::Manual(w) => w.clone(),
        WeightsMode::Auto { base } => base.clone(),
    };
    let mut params = init;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    if setup.optimizer.pretrain_epochs == 0 {
        return Ok((params, steps, epochs));
    }
    let mut scheduler = setup.scheduler(StreamMode::SourceOnly, "pretrain")?;
    let mut optimizer = Optimizer::new(setup.optimizer.kind, setup.optimizer.learning_rate, &params);
    let ctx_weights = weights;
    let mut step = 0usize;
    for epoch in 1..=setup.optimizer.pretrain_epochs {
        for _ in 0..scheduler.steps_per_epoch() {
            step += 1;
            let batch = scheduler.next_batch()?;
            let ctx = ObjectiveContext {
                scenario: setup.scenario,
                // Pre-training is exactly the SourceOnly term set.
                variant: Variant::SourceOnly,
                weights: &ctx_weights,
                graph: setup.graph,
                graph_override: None,
                ae_target_override: None,
            };
            let out = composite_objective(&batch, &params, &ctx).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("pretrain step {step}: {msg}")),
                other => other,
            })?;
            if !out.total.is_finite() {
                return Err(Error::Numeric(format!("pretrain loss became non-finite at step {step}")));
            }
            optimizer.apply(&mut params, &out.grads)?;
            steps.push(StepRecord {
                step,
                epoch,
                phase: "pretrain",
                losses: out.report,
                beta_c: ctx_weights.beta_c,
                beta_m: ctx_weights.beta_m,
                lr: setup.optimizer.learning_rate,
                source_rows: batch.rows_in_domain(crate::data::Domain::Source).len(),
                target_rows: batch.rows_in_domain(crate::data::Domain::Target).len(),
            });
        }
        epochs.push(evaluate_epoch(setup, &params, epoch, "pretrain")?);
    }
    Ok((params, steps, epochs))
}

/// Joint (or baseline) training per the variant's stream mode and term set.
pub fn train(setup: &TrainSetup, init: ModelParams) -> Result<TrainOutcome> {
    setup.variant.compatible_with(setup.scenario)?;
    setup.optimizer.validate()?;
    let mut params = init;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();

    let (mut weights, auto) = match &setup.weights {
        WeightsMode::Manual(w) => (w.clone(), false),
        WeightsMode::Auto { base } => {
            // Warm-up runs with every weight at 1.
            let mut w = base.clone();
            w.beta_c = 1.0;
            w.beta_m = 1.0;
            (w, true)
        }
    };
    let mut warmup_reports: Vec<LossReport> = Vec::new();
    let mut balanced = !auto;

    let mut scheduler = setup.scheduler(setup.variant.stream_mode(), "joint")?;
    let mut optimizer = Optimizer::new(setup.optimizer.kind, setup.optimizer.learning_rate, &params);

    // Start-of-run snapshot: epoch 0 metrics before any joint update.
    epochs.push(evaluate_epoch(setup, &params, 0, "joint")?);

    let mut step = 0usize;
    for epoch in 1..=setup.optimizer.epochs {
        for _ in 0..scheduler.steps_per_epoch() {
            step += 1;
            let batch = scheduler.next_batch()?;
            let ctx = ObjectiveContext {
                scenario: setup.scenario,
                variant: setup.variant,
                weights: &weights,
                graph: setup.graph,
                graph_override: None,
                ae_target_override: None,
            };
            let out = composite_objective(&batch, &params, &ctx)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("joint step {step}: {msg}")),
                    other => other,
                })?;
            if !out.total.is_finite() {
                return Err(Error::Numeric(format!("joint loss became non-finite at step {step}")));
            }
            if let Some(lap) = &out.laplacian {
                // The graph is rebuilt per batch, never cached across steps.
                debug_assert_eq!(lap.rows(), batch.len());
            }
            optimizer.apply(&mut params, &out.grads)?;
            steps.push(StepRecord {
                step,
                epoch,
                phase: "joint",
                losses: out.report.clone(),
                beta_c: weights.beta_c,
                beta_m: weights.beta_m,
                lr: setup.optimizer.learning_rate,
                source_rows: batch.rows_in_domain(crate::data::Domain::Source).len(),
                target_rows: batch.rows_in_domain(crate::data::Domain::Target).len(),
            });
            if !balanced {
                warmup_reports.push(out.report);
                if warmup_reports.len() >= setup.optimizer.warmup_steps {
                    weights = auto_balance(&warmup_reports, &weights)?;
                    balanced = true;
                }
            }
        }
        epochs.push(evaluate_epoch(setup, &params, epoch, "joint")?);
    }

    Ok(TrainOutcome {
        params,
        steps,
        epochs,
        weights,
    })
}

fn evaluate_epoch(setup: &TrainSetup, params: &ModelParams, epoch: usize, phase: &'static str) -> Result<EpochRecord> {
    let mut record = EpochRecord {
        epoch,
        phase,
        accuracy: None,
        rank1: None,
        map: None,
        mid_mass: None,
    };
    let Some(bundle) = setup.eval else {
        return Ok(record);
    };
    match &bundle.task {
        EvalTask::Classification {
            x,
            labels,
            use_target_head,
        } => {
            let fwd = forward_values(params, x)?;
            let logits = if *use_target_head {
                fwd.target_logits
                    .ok_or_else(|| Error::Config("evaluation expects a target head".into()))?
            } else {
                fwd.source_logits
            };
            record.accuracy = Some(classification_accuracy(&logits, labels)?);
        }
        EvalTask::Retrieval {
            query_x,
            query_ids,
            gallery_x,
            gallery_ids,
        } => {
            let q = forward_values(params, query_x)?.features;
            let g = forward_values(params, gallery_x)?.features;
            let r = retrieval_metrics(&q, query_ids, &g, gallery_ids)?;
            record.rank1 = Some(r.rank1);
            record.map = Some(r.map);
        }
    }
    if let Some(pool) = &bundle.target_pool {
        let fc = forward_values(params, pool)?.cfs;
        record.mid_mass = Some(mid_mass(&fc));
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use crate::model::ModelParams;

    fn tiny_arch() -> ArchSpec {
        ArchSpec {
            input_dim: 3,
            hidden: vec![4],
            feat_dim: 3,
            cfs_dim: 2,
            source_classes: 2,
            target_classes: 0,
            ae_decoder: false,
        }
    }

    fn toy_source() -> Dataset {
        let x = Matrix::from_rows(&[
            vec![0.9, 0.1, 0.0],
            vec![0.8, 0.2, 0.1],
            vec![0.1, 0.9, 0.3],
            vec![0.0, 0.8, 0.4],
        ])
        .unwrap();
        Dataset::new(x, vec![0, 0, 1, 1], Domain::Source).unwrap()
    }

    fn toy_target() -> Dataset {
        let x = Matrix::from_rows(&[
            vec![0.5, 0.5, 0.9],
            vec![0.4, 0.6, 0.8],
            vec![0.6, 0.4, 0.7],
            vec![0.5, 0.5, 0.6],
        ])
        .unwrap();
        Dataset::new(x, vec![2, 2, 3, 3], Domain::Target).unwrap()
    }

    fn opt(epochs: usize, pretrain: usize) -> OptimizerConfig {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 0.01,
            epochs,
            pretrain_epochs: pretrain,
            batch_size: 4,
            warmup_steps: 4,
        }
    }

    #[test]
    fn test_sgd_one_step_rule() {
        let arch = tiny_arch();
        let mut params = ModelParams::zeros(&arch).unwrap();
        let mut optimizer = Optimizer::new(OptimizerKind::Sgd, 0.1, &params);
        let mut grads: Vec<Option<Matrix>> = params.entries().iter().map(|_| None).collect();
        let mut g0 = Matrix::zeros(4, 3);
        g0.set(0, 0, 1.0);
        grads[0] = Some(g0);
        optimizer.apply(&mut params, &grads).unwrap();
        assert_eq!(params.extractor[0].weight.get(0, 0), -0.1);
        assert_eq!(params.extractor[0].weight.get(0, 1), 0.0);
    }

    #[test]
    fn test_zero_gradient_keeps_parameters() {
        let arch = tiny_arch();
        let mut params = ModelParams::zeros(&arch).unwrap();
        let before = params.clone();
        let mut optimizer = Optimizer::new(OptimizerKind::Adam, 0.05, &params);
        let grads: Vec<Option<Matrix>> = params.entries().iter().map(|_| None).collect();
        optimizer.apply(&mut params, &grads).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn test_adam_first_step_magnitude_is_lr() {
        // Bias-corrected first step: m_hat/sqrt(v_hat) = sign(g), so the
        // update magnitude is the learning rate for any nonzero gradient.
        let arch = tiny_arch();
        let mut params = ModelParams::zeros(&arch).unwrap();
        let lr = 0.002;
        let mut optimizer = Optimizer::new(OptimizerKind::Adam, lr, &params);
        let mut grads: Vec<Option<Matrix>> = params.entries().iter().map(|_| None).collect();
        let mut g0 = Matrix::zeros(4, 3);
        g0.set(0, 0, 0.37);
        g0.set(1, 2, -5.0);
        grads[0] = Some(g0);
        optimizer.apply(&mut params, &grads).unwrap();
        let w = &params.extractor[0].weight;
        assert!((w.get(0, 0) + lr).abs() < 1e-9);
        assert!((w.get(1, 2) - lr).abs() < 1e-9);
    }

    #[test]
    fn test_nonfinite_gradient_names_parameter() {
        let arch = tiny_arch();
        let mut params = ModelParams::zeros(&arch).unwrap();
        let mut optimizer = Optimizer::new(OptimizerKind::Sgd, 0.1, &params);
        let names: Vec<String> = params.entries().iter().map(|(n, _)| n.clone()).collect();
        let idx = names.iter().position(|n| n == "cfs.weight").unwrap();
        let mut grads: Vec<Option<Matrix>> = params.entries().iter().map(|_| None).collect();
        let mut bad = Matrix::zeros(2, 3);
        bad.set(0, 0, f64::NAN);
        grads[idx] = Some(bad);
        let err = optimizer.apply(&mut params, &grads).unwrap_err().to_string();
        assert!(err.contains("cfs.weight"), "{err}");
    }

    #[test]
    fn test_zero_epochs_returns_init_unchanged() {
        let arch = tiny_arch();
        let src = toy_source();
        let optimizer = opt(0, 0);
        let graph = GraphConfig::default();
        let setup = TrainSetup {
            scenario: Scenario::Uda,
            variant: Variant::SourceOnly,
            arch: &arch,
            weights: WeightsMode::Manual(LossWeights::default()),
            optimizer: &optimizer,
            graph: &graph,
            source_train: &src,
            target_train: None,
            kshot: None,
            eval: None,
            seed: 1,
        };
        let init = ModelParams::init(&arch, &mut stream_rng(1, "init")).unwrap();
        let (out, steps, _) = pretrain_source(&setup, init.clone()).unwrap();
        assert_eq!(out, init);
        assert!(steps.is_empty());
    }

    #[test]
    fn test_pretrain_determinism_identical_checkpoints() {
        let arch = tiny_arch();
        let src = toy_source();
        let optimizer = opt(0, 3);
        let graph = GraphConfig::default();
        let run = || {
            let setup = TrainSetup {
                scenario: Scenario::Uda,
                variant: Variant::SourceOnly,
                arch: &arch,
                weights: WeightsMode::Manual(LossWeights::default()),
                optimizer: &optimizer,
                graph: &graph,
                source_train: &src,
                target_train: None,
                kshot: None,
                eval: None,
                seed: 5,
            };
            let init = ModelParams::init(&arch, &mut stream_rng(5, "init")).unwrap();
            pretrain_source(&setup, init).unwrap().0
        };
        let a = run();
        let b = run();
        for ((_, ma), (_, mb)) in a.entries().iter().zip(b.entries().iter()) {
            assert!(ma.bits_eq(mb));
        }
    }

    #[test]
    fn test_source_only_training_consumes_no_target_rows() {
        let arch = tiny_arch();
        let src = toy_source();
        let tgt = toy_target();
        let optimizer = opt(2, 0);
        let graph = GraphConfig::default();
        let setup = TrainSetup {
            scenario: Scenario::Uda,
            variant: Variant::SourceOnly,
            arch: &arch,
            weights: WeightsMode::Manual(LossWeights::default()),
            optimizer: &optimizer,
            graph: &graph,
            source_train: &src,
            target_train: Some(&tgt),
            kshot: None,
            eval: None,
            seed: 2,
        };
        let init = ModelParams::init(&arch, &mut stream_rng(2, "init")).unwrap();
        let out = train(&setup, init).unwrap();
        assert!(out.steps.iter().all(|s| s.target_rows == 0));
        assert!(out.steps.iter().all(|s| s.losses.graph.is_none()));
    }

    #[test]
    fn test_variant_isolation_minus_graph_never_logs_graph() {
        let arch = tiny_arch();
        let src = toy_source();
        let tgt = toy_target();
        let optimizer = opt(2, 0);
        let graph = GraphConfig::default();
        let setup = TrainSetup {
            scenario: Scenario::Uda,
            variant: Variant::CfsmMinusGraph,
            arch: &arch,
            weights: WeightsMode::Manual(LossWeights::default()),
            optimizer: &optimizer,
            graph: &graph,
            source_train: &src,
            target_train: Some(&tgt),
            kshot: None,
            eval: None,
            seed: 3,
        };
        let init = ModelParams::init(&arch, &mut stream_rng(3, "init")).unwrap();
        let out = train(&setup, init).unwrap();
        assert!(!out.steps.is_empty());
        for s in &out.steps {
            assert!(s.losses.graph.is_none());
            assert!(s.losses.factorisation.is_some());
            assert!(s.losses.target_entropy.is_some());
            assert_eq!(s.source_rows, 2);
            assert_eq!(s.target_rows, 2);
        }
    }

    #[test]
    fn test_auto_balance_freezes_after_warmup() {
        let arch = tiny_arch();
        let src = toy_source();
        let tgt = toy_target();
        let optimizer = opt(3, 0);
        let graph = GraphConfig::default();
        let setup = TrainSetup {
            scenario: Scenario::Uda,
            variant: Variant::Cfsm,
            arch: &arch,
            weights: WeightsMode::Auto {
                base: LossWeights::default(),
            },
            optimizer: &optimizer,
            graph: &graph,
            source_train: &src,
            target_train: Some(&tgt),
            kshot: None,
            eval: None,
            seed: 4,
        };
        let init = ModelParams::init(&arch, &mut stream_rng(4, "init")).unwrap();
        let out = train(&setup, init).unwrap();
        // Warm-up steps run at unit betas, later steps at the frozen values.
        assert_eq!(out.steps[0].beta_c, 1.0);
        assert_eq!(out.steps[0].beta_m, 1.0);
        let last = out.steps.last().unwrap();
        assert_eq!(last.beta_c, out.weights.beta_c);
        assert_eq!(last.beta_m, out.weights.beta_m);
        // Snapped to powers of ten.
        for beta in [out.weights.beta_c, out.weights.beta_m] {
            if beta > 0.0 {
                let log = beta.log10();
                assert!((log - log.round()).abs() < 1e-12, "beta {beta} not a power of ten");
            }
        }
    }
}
