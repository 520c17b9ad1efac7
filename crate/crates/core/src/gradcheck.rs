//! Central finite-difference verification of every differentiable operation
//! and of the composite objective under each scenario. The analytic
//! gradients come off the tape; the oracle re-evaluates the loss at
//! perturbed inputs and never touches the backward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, Domain};
use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::losses::LossWeights;
use crate::model::{ArchSpec, ModelParams};
use crate::numerics::{Matrix, Tape, TapeId};
use crate::objective::{composite_objective, composite_value, ObjectiveContext};
use crate::rng::stream_rng;
use crate::scenario::{GraphTermMode, Scenario, Variant};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

type LossBuilder<'a> = Box<dyn Fn(&mut Tape, &[TapeId]) -> Result<TapeId> + 'a>;

#[derive(Clone, Debug)]
pub struct CheckEntry {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn worst(&self) -> Option<&CheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
    }
}

/// Scale-normalised max deviation between analytic and finite-difference
/// gradients.
fn relative_error(analytic: &Matrix, fd: &Matrix) -> f64 {
    let mut err: f64 = 0.0;
    for (a, b) in analytic.data().iter().zip(fd.data().iter()) {
        err = err.max((a - b).abs());
    }
    let scale = 1f64.max(analytic.max_abs()).max(fd.max_abs());
    err / scale
}

/// One elementary-op check problem: a scalar loss as a function of named
/// parameter matrices.
struct OpProblem<'a> {
    params: Vec<Matrix>,
    build: LossBuilder<'a>,
}

fn check_problem(problem: &OpProblem, perturb: bool) -> Result<f64> {
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TapeId> = problem
        .params
        .iter()
        .map(|m| tape.leaf(m.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = (problem.build)(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (pi, base) in problem.params.iter().enumerate() {
        let mut analytic = grads
            .get(ids[pi])
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(base.rows(), base.cols()));
        if perturb {
            analytic = analytic.map(|g| g * 1.01 + 1e-3);
        }
        let mut fd = Matrix::zeros(base.rows(), base.cols());
        for r in 0..base.rows() {
            for c in 0..base.cols() {
                let eval = |delta: f64| -> Result<f64> {
                    let mut tape = Tape::new();
                    let ids: Vec<TapeId> = problem
                        .params
                        .iter()
                        .enumerate()
                        .map(|(i, m)| {
                            let mut m = m.clone();
                            if i == pi {
                                m.set(r, c, m.get(r, c) + delta);
                            }
                            tape.leaf(m)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let loss = (problem.build)(&mut tape, &ids)?;
                    tape.scalar_value(loss)
                };
                let plus = eval(FD_STEP)?;
                let minus = eval(-FD_STEP)?;
                fd.set(r, c, (plus - minus) / (2.0 * FD_STEP));
            }
        }
        worst = worst.max(relative_error(&analytic, &fd));
    }
    Ok(worst)
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random values kept away from the relu/clamp kinks so the central
/// difference stays two-sided.
fn rand_matrix_away_from(rng: &mut ChaCha8Rng, rows: usize, cols: usize, kinks: &[f64]) -> Matrix {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| loop {
            let v = rng.gen_range(-2.0..2.0);
            if kinks.iter().all(|k| (v - k).abs() > 50.0 * FD_STEP) {
                break v;
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

type Maker<'r> = (
    &'static str,
    Box<dyn Fn(&mut ChaCha8Rng) -> OpProblem<'static> + 'r>,
);

fn op_suite(seed: u64, instances: usize, perturb: Option<&str>) -> Result<Vec<CheckEntry>> {
    let mut entries = Vec::new();

    let makers: Vec<Maker> = vec![
        (
            "matmul",
            Box::new(|rng: &mut ChaCha8Rng| {
                let a = rand_matrix(rng, 3, 4, -2.0, 2.0);
                let b = rand_matrix(rng, 4, 2, -2.0, 2.0);
                let probe = rand_matrix(rng, 3, 2, -1.0, 1.0);
                OpProblem {
                    params: vec![a, b],
                    build: Box::new(move |tape, ids| {
                        let p = tape.matmul(ids[0], ids[1])?;
                        let probe_id = tape.constant(probe.clone())?;
                        let weighted = tape.mul(p, probe_id)?;
                        tape.sum(weighted)
                    }),
                }
            }),
        ),
        (
            "add",
            Box::new(|rng: &mut ChaCha8Rng| {
                let a = rand_matrix(rng, 3, 3, -2.0, 2.0);
                let b = rand_matrix(rng, 3, 3, -2.0, 2.0);
                let probe = rand_matrix(rng, 3, 3, -1.0, 1.0);
                OpProblem {
                    params: vec![a, b],
                    build: Box::new(move |tape, ids| {
                        let s = tape.add(ids[0], ids[1])?;
                        let probe_id = tape.constant(probe.clone())?;
                        let w = tape.mul(s, probe_id)?;
                        tape.sum(w)
                    }),
                }
            }),
        ),
        (
            "sub",
            Box::new(|rng: &mut ChaCha8Rng| {
                let a = rand_matrix(rng, 3, 3, -2.0, 2.0);
                let b = rand_matrix(rng, 3, 3, -2.0, 2.0);
                let probe = rand_matrix(rng, 3, 3, -1.0, 1.0);
                OpProblem {
                    params: vec![a, b],
                    build: Box::new(move |tape, ids| {
                        let s = tape.sub(ids[0], ids[1])?;
                        let probe_id = tape.constant(probe.clone())?;
                        let w = tape.mul(s, probe_id)?;
                        tape.sum(w)
                    }),
                }
            }),
        ),
        (
            "mul",
            Box::new(|rng: &mut ChaCha8Rng| {
                let a = rand_matrix(rng, 3, 3, -2.0, 2.0);
                let b = rand_matrix(rng, 3, 3, -2.0, 2.0);
                OpProblem {
                    params: vec![a, b],
                    build: Box::new(|tape, ids| {
                        let m = tape.mul(ids[0], ids[1])?;
                        tape.sum(m)
                    }),
                }
            }),
        ),
        (
            "add_bias",
            Box::new(|rng: &mut ChaCha8Rng| {
                let a = rand_matrix(rng, 4, 3, -2.0, 2.0);
                let b = rand_matrix(rng, 1, 3, -2.0, 2.0);
                let probe = rand_matrix(rng, 4, 3, -1.0, 1.0);
                OpProblem {
                    params: vec![a, b],
                    build: Box::new(move |tape, ids| {
                        let s = tape.add_bias(ids[0], ids[1])?;
                        let probe_id = tape.constant(probe.clone())?;
                        let w = tape.mul(s, probe_id)?;
                        tape.sum(w)
                    }),
                }
            }),
        ),
        (
            "scale_add_scalar",
            Box::new(|rng: &mut ChaCha8Rng| {
                let a = rand_matrix(rng, 3, 3, -2.0, 2.0);
                OpProblem {
                    params: vec![a],
                    build: Box::new(|tape, ids| {
                        let s = tape.scale(ids[0], -1.7)?;
                        let t = tape.add_scalar(s, 0.4)?;
                        let sq = tape.mul(t, t)?;
                        tape.sum(sq)
                    }),
                }
            }),
        ),
        (
            "log",
            Box::new(|rng: &mut ChaCha8Rng| {
                let a = rand_matrix(rng, 3, 3, 0.1, 3.0);
                OpProblem {
                    params: vec![a],
                    build: Box::new(|tape, ids| {
                        let l = tape.log(ids[0])?;
                        tape.sum(l)
                    }),
                }
            }),
        ),
        (
            "exp",
            Box::new(|rng: &mut ChaCha8Rng| {
                let a = rand_matrix(rng, 3, 3, -1.5, 1.5);
                OpProblem {
                    params: vec![a],
                    build: Box::new(|tape, ids| {
                        let e = tape.exp(ids[0])?;
                        tape.sum(e)
                    }),
                }
            }),
        ),
        (
            "sqrt",
            Box::new(|rng: &mut ChaCha8Rng| {
                let a = rand_matrix(rng, 3, 3, 0.1, 4.0);
                OpProblem {
                    params: vec![a],
                    build: Box::new(|tape, ids| {
                        let s = tape.sqrt(ids[0])?;
                        tape.sum(s)
                    }),
                }
            }),
        ),
        (
            "relu",
            Box::new(|rng: &mut ChaCha8Rng| {
                let a = rand_matrix_away_from(rng, 3, 4, &[0.0]);
                let probe = rand_matrix(rng, 3, 4, -1.0, 1.0);
                OpProblem {
                    params: vec![a],
                    build: Box::new(move |tape, ids| {
                        let r = tape.relu(ids[0])?;
                        let probe_id = tape.constant(probe.clone())?;
                        let w = tape.mul(r, probe_id)?;
                        tape.sum(w)
                    }),
                }
            }),
        ),
        (
            "sigmoid",
            Box::new(|rng: &mut ChaCha8Rng| {
                let a = rand_matrix(rng, 3, 4, -3.0, 3.0);
                let probe = rand_matrix(rng, 3, 4, -1.0, 1.0);
                OpProblem {
                    params: vec![a],
                    build: Box::new(move |tape, ids| {
                        let s = tape.sigmoid(ids[0])?;
                        let probe_id = tape.constant(probe.clone())?;
                        let w = tape.mul(s, probe_id)?;
                        tape.sum(w)
                    }),
                }
            }),
        ),
        (
            "clamp",
            Box::new(|rng: &mut ChaCha8Rng| {
                let a = rand_matrix_away_from(rng, 3, 4, &[-1.0, 1.0]);
                let probe = rand_matrix(rng, 3, 4, -1.0, 1.0);
                OpProblem {
                    params: vec![a],
                    build: Box::new(move |tape, ids| {
                        let cl = tape.clamp(ids[0], -1.0, 1.0)?;
                        let probe_id = tape.constant(probe.clone())?;
                        let w = tape.mul(cl, probe_id)?;
                        tape.sum(w)
                    }),
                }
            }),
        ),
        (
            "sum_mean",
            Box::new(|rng: &mut ChaCha8Rng| {
                let a = rand_matrix(rng, 3, 5, -2.0, 2.0);
                OpProblem {
                    params: vec![a],
                    build: Box::new(|tape, ids| {
                        let s = tape.sum(ids[0])?;
                        let m = tape.mean(ids[0])?;
                        let sm = tape.mul(s, m)?;
                        tape.sum(sm)
                    }),
                }
            }),
        ),
        (
            "row_log_softmax",
            Box::new(|rng: &mut ChaCha8Rng| {
                let a = rand_matrix(rng, 4, 5, -2.0, 2.0);
                let probe = rand_matrix(rng, 4, 5, -1.0, 1.0);
                OpProblem {
                    params: vec![a],
                    build: Box::new(move |tape, ids| {
                        let ls = tape.row_log_softmax(ids[0])?;
                        let probe_id = tape.constant(probe.clone())?;
                        let w = tape.mul(ls, probe_id)?;
                        tape.sum(w)
                    }),
                }
            }),
        ),
        (
            "gather_rows",
            Box::new(|rng: &mut ChaCha8Rng| {
                let a = rand_matrix(rng, 5, 3, -2.0, 2.0);
                let idx: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
                let probe = rand_matrix(rng, 4, 3, -1.0, 1.0);
                OpProblem {
                    params: vec![a],
                    build: Box::new(move |tape, ids| {
                        let g = tape.gather_rows(ids[0], &idx)?;
                        let probe_id = tape.constant(probe.clone())?;
                        let w = tape.mul(g, probe_id)?;
                        tape.sum(w)
                    }),
                }
            }),
        ),
        (
            "transpose",
            Box::new(|rng: &mut ChaCha8Rng| {
                let a = rand_matrix(rng, 3, 4, -2.0, 2.0);
                let probe = rand_matrix(rng, 4, 3, -1.0, 1.0);
                OpProblem {
                    params: vec![a],
                    build: Box::new(move |tape, ids| {
                        let t = tape.transpose(ids[0])?;
                        let probe_id = tape.constant(probe.clone())?;
                        let w = tape.mul(t, probe_id)?;
                        tape.sum(w)
                    }),
                }
            }),
        ),
    ];

    for (name, maker) in makers {
        let mut rng = stream_rng(seed, &format!("gradcheck.{name}"));
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let problem = maker(&mut rng);
            let should_perturb = perturb == Some(name);
            worst = worst.max(check_problem(&problem, should_perturb)?);
        }
        entries.push(CheckEntry {
            name: name.to_string(),
            instances,
            max_rel_err: worst,
            pass: worst < TOLERANCE,
        });
    }
    Ok(entries)
}

fn tiny_arch(scenario: Scenario, variant: Variant) -> ArchSpec {
    ArchSpec {
        input_dim: 4,
        hidden: vec![5],
        feat_dim: 3,
        cfs_dim: 3,
        source_classes: 3,
        target_classes: if scenario.has_target_head() { 2 } else { 0 },
        ae_decoder: variant.needs_ae_decoder(),
    }
}

fn random_composite_batch(scenario: Scenario, variant: Variant, rng: &mut ChaCha8Rng) -> Batch {
    let (n_source, n_target) = match variant.stream_mode() {
        crate::data::StreamMode::Joint => (3, 3),
        crate::data::StreamMode::SourceOnly => (6, 0),
        crate::data::StreamMode::TargetLabelledOnly => (0, 6),
    };
    let n = n_source + n_target;
    let x = rand_matrix(rng, n, 4, -1.0, 1.0);
    let mut labels = Vec::new();
    let mut domain = Vec::new();
    for i in 0..n_source {
        // Guarantee a positive pair and a negative so the batch-hard path
        // is always live in retrieval scenarios.
        let label = match i {
            0 | 1 => 0,
            2 => 1,
            _ => rng.gen_range(0..3),
        };
        labels.push(Some(label));
        domain.push(Domain::Source);
    }
    for i in 0..n_target {
        let label = match scenario {
            // Half the target rows carry k-shot labels in the semi scenario.
            Scenario::SemiDlstl { .. } if i % 2 == 0 => Some(rng.gen_range(0..2)),
            _ => None,
        };
        labels.push(label);
        domain.push(Domain::Target);
    }
    Batch { x, labels, domain }
}

/// Central differences need the loss to be smooth inside the h-window, so
/// instances whose relu inputs, hinge arguments or batch-hard selections sit
/// within a small margin of a kink are rejected and redrawn.
fn instance_is_smooth(
    params: &ModelParams,
    batch: &Batch,
    scenario: Scenario,
    variant: Variant,
    margin_weights: &LossWeights,
) -> Result<bool> {
    const RELU_MARGIN: f64 = 5e-4;
    const SELECT_MARGIN: f64 = 1e-3;

    // Extractor relu inputs away from zero; CFS pre-activations away from
    // the sigmoid clamp band.
    let mut h = batch.x.clone();
    for layer in &params.extractor {
        let mut pre = h.matmul(&layer.weight.transpose())?;
        for r in 0..pre.rows() {
            for c in 0..pre.cols() {
                pre.set(r, c, pre.get(r, c) + layer.bias.get(0, c));
            }
        }
        if pre.data().iter().any(|v| v.abs() < RELU_MARGIN) {
            return Ok(false);
        }
        h = pre.map(|v| v.max(0.0));
    }
    let features = h;
    let mut z = features.matmul(&params.cfs.weight.transpose())?;
    for r in 0..z.rows() {
        for c in 0..z.cols() {
            z.set(r, c, z.get(r, c) + params.cfs.bias.get(0, c));
        }
    }
    if z.data().iter().any(|v| v.abs() > 14.0) {
        return Ok(false);
    }

    // Batch-hard structure: hinge arguments and best-vs-runner-up gaps must
    // clear the margin, otherwise the perturbed loss may switch branch.
    let terms = variant.term_set(scenario);
    if terms.triplet {
        let src_rows = batch.labelled_rows_in_domain(Domain::Source);
        let labels: Vec<usize> = src_rows.iter().map(|&i| batch.labels[i].unwrap()).collect();
        let n = src_rows.len();
        let dist = |a: usize, b: usize| -> f64 {
            features.row_sq_distance(src_rows[a], src_rows[b]).sqrt()
        };
        for a in 0..n {
            let mut pos: Vec<f64> = Vec::new();
            let mut neg: Vec<f64> = Vec::new();
            for j in 0..n {
                if j == a {
                    continue;
                }
                if labels[j] == labels[a] {
                    pos.push(dist(a, j));
                } else {
                    neg.push(dist(a, j));
                }
            }
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            pos.sort_by(|x, y| y.partial_cmp(x).unwrap());
            neg.sort_by(|x, y| x.partial_cmp(y).unwrap());
            if pos.len() > 1 && pos[0] - pos[1] < SELECT_MARGIN {
                return Ok(false);
            }
            if neg.len() > 1 && neg[1] - neg[0] < SELECT_MARGIN {
                return Ok(false);
            }
            let hinge_arg = pos[0] - neg[0] + margin_weights.triplet_margin;
            if hinge_arg.abs() < SELECT_MARGIN {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// FD check of the composite objective for one scenario/variant pair. The
/// batch Laplacian is computed once from the base parameters and then held
/// fixed, matching the stop-gradient treatment of the graph.
fn check_composite(
    scenario: Scenario,
    variant: Variant,
    seed: u64,
    instances: usize,
    perturb: bool,
) -> Result<f64> {
    let name = format!("composite.{}.{}", scenario.name(), variant.name());
    let mut rng = stream_rng(seed, &format!("gradcheck.{name}"));
    let arch = tiny_arch(scenario, variant);
    let weights = LossWeights {
        beta_c: 0.8,
        beta_m: 0.6,
        beta_target_entropy: 0.5,
        beta_ae: 0.9,
        label_smoothing: 0.1,
        triplet_margin: 0.4,
        binary_entropy: false,
    };
    let graph = GraphConfig {
        k: 3,
        ..GraphConfig::default()
    };
    let mut worst: f64 = 0.0;

    for _ in 0..instances {
        // Redraw until the instance is smooth inside the FD window.
        let (params, batch) = {
            let mut attempt = 0;
            loop {
                let mut init_rng = stream_rng(rng.gen(), "gradcheck.composite.init");
                let params = ModelParams::init(&arch, &mut init_rng)?;
                let batch = random_composite_batch(scenario, variant, &mut rng);
                if instance_is_smooth(&params, &batch, scenario, variant, &weights)? {
                    break (params, batch);
                }
                attempt += 1;
                if attempt > 500 {
                    return Err(Error::Contract(format!(
                        "could not draw a kink-free instance for {name} after {attempt} attempts"
                    )));
                }
            }
        };

        // Freeze the Laplacian from the base parameters.
        let terms = variant.term_set(scenario);
        let fwd = crate::model::forward_values(&params, &batch.x)?;
        let laplacian = if terms.graph != GraphTermMode::Off {
            let points = match terms.graph {
                GraphTermMode::TopDown => &fwd.cfs,
                GraphTermMode::Classic => &fwd.features,
                GraphTermMode::Off => unreachable!(),
            };
            Some(graph.batch_laplacian(points)?)
        } else {
            None
        };
        // The AE reconstruction target is stop-gradient F; freeze it too.
        let ae_target = if terms.ae { Some(fwd.features.clone()) } else { None };
        let ctx = ObjectiveContext {
            scenario,
            variant,
            weights: &weights,
            graph: &graph,
            graph_override: laplacian.as_ref(),
            ae_target_override: ae_target.as_ref(),
        };

        let out = composite_objective(&batch, &params, &ctx)?;
        let entry_shapes: Vec<(usize, usize)> = params.entries().iter().map(|(_, m)| m.shape()).collect();

        for (pi, &(rows, cols)) in entry_shapes.iter().enumerate() {
            let mut analytic = out.grads[pi].clone().unwrap_or_else(|| Matrix::zeros(rows, cols));
            if perturb {
                analytic = analytic.map(|g| g * 1.01 + 1e-3);
            }
            let mut fd = Matrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    let eval = |delta: f64| -> Result<f64> {
                        let mut p = params.clone();
                        {
                            let mut entries = p.entries_mut();
                            let (_, m) = &mut entries[pi];
                            m.set(r, c, m.get(r, c) + delta);
                        }
                        composite_value(&batch, &p, &ctx)
                    };
                    let plus = eval(FD_STEP)?;
                    let minus = eval(-FD_STEP)?;
                    fd.set(r, c, (plus - minus) / (2.0 * FD_STEP));
                }
            }
            worst = worst.max(relative_error(&analytic, &fd));
        }
    }
    Ok(worst)
}

/// Scenario/variant pairs covered by the composite sweep: every scenario,
/// plus the variants that change the loss surface shape.
pub fn composite_cases() -> Vec<(Scenario, Variant)> {
    vec![
        (Scenario::Uda, Variant::Cfsm),
        (Scenario::Uda, Variant::JointFt),
        (Scenario::SemiDlstl { k: 2 }, Variant::Cfsm),
        (Scenario::SemiDlstl { k: 2 }, Variant::FtTarget),
        (Scenario::UnsupDlstl, Variant::Cfsm),
        (Scenario::UnsupDlstl, Variant::CfsmClassicGraph),
        (Scenario::UnsupDlstl, Variant::Ae),
        (Scenario::UnsupDlstl, Variant::SourcePlusRegs),
    ]
}

/// Run the whole suite: every elementary op and every composite case.
/// `perturb` deliberately corrupts the named entry's analytic gradient, as a
/// negative control that the checker catches wrong gradients.
pub fn run_full_suite(seed: u64, instances: usize, perturb: Option<&str>) -> Result<CheckReport> {
    let mut entries = op_suite(seed, instances, perturb)?;
    for (scenario, variant) in composite_cases() {
        let name = format!("composite.{}.{}", scenario.name(), variant.name());
        let worst = check_composite(
            scenario,
            variant,
            seed,
            // Composite instances are expensive; spread the budget.
            instances.div_ceil(4).max(3),
            perturb == Some(name.as_str()),
        )?;
        entries.push(CheckEntry {
            name,
            instances: instances.div_ceil(4).max(3),
            max_rel_err: worst,
            pass: worst < TOLERANCE,
        });
    }
    Ok(CheckReport { entries })
}
