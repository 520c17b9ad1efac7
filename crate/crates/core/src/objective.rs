//! Assembly of the composite optimisation objective for one minibatch:
//! supervised terms on labelled rows, the factorisation and graph
//! regularisers on all rows, scenario extras, and the backward pass.

use crate::data::{Batch, Domain};
use crate::error::{Error, Result};
use crate::graph::{graph_loss, GraphConfig, Laplacian};
use crate::losses::{
    factorisation_entropy, reconstruction_loss, supervised_xent, target_prediction_entropy,
    triplet_loss, LossReport, LossWeights,
};
use crate::model::{ae_reconstruct, cfs_forward, classify, feature_extract, ModelParams};
use crate::numerics::{Matrix, Tape, TapeId};
use crate::scenario::{GraphTermMode, Scenario, Variant};

pub struct ObjectiveContext<'a> {
    pub scenario: Scenario,
    pub variant: Variant,
    pub weights: &'a LossWeights,
    pub graph: &'a GraphConfig,
    /// Reuse a precomputed Laplacian instead of building one from this
    /// batch. The finite-difference harness uses this to hold the graph
    /// fixed, matching the stop-gradient contract.
    pub graph_override: Option<&'a Laplacian>,
    /// Fixed reconstruction target for the AE term; the target is
    /// stop-gradient F, so the FD harness freezes it the same way.
    pub ae_target_override: Option<&'a Matrix>,
}

#[derive(Debug)]
pub struct CompositeOutcome {
    pub total: f64,
    pub report: LossReport,
    /// Per-parameter gradients aligned with `ModelParams::entries` order.
    pub grads: Vec<Option<Matrix>>,
    /// The batch Laplacian actually used, when the graph term was active.
    pub laplacian: Option<Laplacian>,
}

/// Evaluate the full objective on one batch and sweep gradients.
pub fn composite_objective(
    batch: &Batch,
    params: &ModelParams,
    ctx: &ObjectiveContext,
) -> Result<CompositeOutcome> {
    let (value, report, laplacian, tape, total_id, leaf_ids) = forward_objective(batch, params, ctx)?;
    let gradients = tape.backward(total_id)?;
    let grads = leaf_ids
        .iter()
        .map(|&id| gradients.get(id).cloned())
        .collect();
    Ok(CompositeOutcome {
        total: value,
        report,
        grads,
        laplacian,
    })
}

/// Forward-only variant used by the gradient checker: same construction,
/// no backward sweep.
pub fn composite_value(batch: &Batch, params: &ModelParams, ctx: &ObjectiveContext) -> Result<f64> {
    let (value, _, _, _, _, _) = forward_objective(batch, params, ctx)?;
    Ok(value)
}

type ForwardOut = (
    f64,
    LossReport,
    Option<Laplacian>,
    Tape,
    TapeId,
    Vec<TapeId>,
);

fn forward_objective(batch: &Batch, params: &ModelParams, ctx: &ObjectiveContext) -> Result<ForwardOut> {
    ctx.variant.compatible_with(ctx.scenario)?;
    validate_batch_labels(batch, ctx.scenario)?;
    if batch.is_empty() {
        return Err(Error::Data("cannot evaluate the objective on an empty batch".into()));
    }
    let terms = ctx.variant.term_set(ctx.scenario);
    let w = ctx.weights;

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let leaf_ids = bound.leaf_ids();
    let x = tape.constant(batch.x.clone())?;
    let features = feature_extract(&mut tape, x, &bound)?;
    let (z, fc) = cfs_forward(&mut tape, features, &bound)?;

    let mut report = LossReport::default();
    // (term id on tape, weight) pairs, summed at the end.
    let mut weighted: Vec<(TapeId, f64)> = Vec::new();

    if terms.supervised {
        let mut parts: Vec<TapeId> = Vec::new();
        let src_rows = batch.labelled_rows_in_domain(Domain::Source);
        if !src_rows.is_empty() {
            let z_src = tape.gather_rows(z, &src_rows)?;
            let logits = classify(&mut tape, z_src, &bound.source_head)?;
            let labels: Vec<usize> = src_rows.iter().map(|&i| batch.labels[i].unwrap()).collect();
            parts.push(supervised_xent(&mut tape, logits, &labels, w.label_smoothing)?);
        }
        let tgt_rows = batch.labelled_rows_in_domain(Domain::Target);
        if !tgt_rows.is_empty() {
            let head = bound
                .target_head
                .as_ref()
                .ok_or_else(|| Error::Config("labelled target rows but no target classifier head".into()))?;
            let z_tgt = tape.gather_rows(z, &tgt_rows)?;
            let logits = classify(&mut tape, z_tgt, head)?;
            let labels: Vec<usize> = tgt_rows.iter().map(|&i| batch.labels[i].unwrap()).collect();
            parts.push(supervised_xent(&mut tape, logits, &labels, w.label_smoothing)?);
        }
        if let Some(first) = parts.first().copied() {
            let mut sup = first;
            for part in &parts[1..] {
                sup = tape.add(sup, *part)?;
            }
            report.supervised = Some(tape.scalar_value(sup)?);
            weighted.push((sup, 1.0));
        }
    }

    if terms.triplet {
        let src_rows = batch.labelled_rows_in_domain(Domain::Source);
        if !src_rows.is_empty() {
            let f_src = tape.gather_rows(features, &src_rows)?;
            let labels: Vec<usize> = src_rows.iter().map(|&i| batch.labels[i].unwrap()).collect();
            let outcome = triplet_loss(&mut tape, f_src, &labels, w.triplet_margin)?;
            report.triplet = Some(tape.scalar_value(outcome.loss)?);
            weighted.push((outcome.loss, 1.0));
        }
    }

    if terms.factorisation {
        let ent = factorisation_entropy(&mut tape, fc, w.binary_entropy)?;
        report.factorisation = Some(tape.scalar_value(ent)?);
        weighted.push((ent, w.beta_c));
    }

    let mut laplacian_used: Option<Laplacian> = None;
    if terms.graph != GraphTermMode::Off {
        // The graph is built on detached values: a stop-gradient Laplacian.
        let lap = match ctx.graph_override {
            Some(l) => l.clone(),
            None => {
                let points = match terms.graph {
                    GraphTermMode::TopDown => tape.value(fc),
                    GraphTermMode::Classic => tape.value(features),
                    GraphTermMode::Off => unreachable!(),
                };
                ctx.graph.batch_laplacian(points)?
            }
        };
        let regulated = match terms.graph {
            GraphTermMode::TopDown => features,
            GraphTermMode::Classic => fc,
            GraphTermMode::Off => unreachable!(),
        };
        let mut g = graph_loss(&mut tape, regulated, &lap)?;
        if ctx.graph.normalize_by_n {
            g = tape.scale(g, 1.0 / batch.len() as f64)?;
        }
        report.graph = Some(tape.scalar_value(g)?);
        weighted.push((g, w.beta_m));
        laplacian_used = Some(lap);
    }

    if terms.target_entropy {
        let tgt_rows = batch.rows_in_domain(Domain::Target);
        if !tgt_rows.is_empty() {
            // UDA shares the source head across domains.
            let z_tgt = tape.gather_rows(z, &tgt_rows)?;
            let logits = classify(&mut tape, z_tgt, &bound.source_head)?;
            let ent = target_prediction_entropy(&mut tape, logits)?;
            report.target_entropy = Some(tape.scalar_value(ent)?);
            weighted.push((ent, w.beta_target_entropy));
        }
    }

    if terms.ae {
        let reconstructed = ae_reconstruct(&mut tape, fc, &bound)?;
        let target = match ctx.ae_target_override {
            Some(t) => t.clone(),
            None => tape.value(features).clone(),
        };
        let recon = reconstruction_loss(&mut tape, reconstructed, &target)?;
        report.ae = Some(tape.scalar_value(recon)?);
        weighted.push((recon, w.beta_ae));
    }

    if weighted.is_empty() {
        return Err(Error::Config(format!(
            "variant {} produced no active loss terms on this batch",
            ctx.variant.name()
        )));
    }

    let mut total_id = {
        let (id, weight) = weighted[0];
        tape.scale(id, weight)?
    };
    for &(id, weight) in &weighted[1..] {
        let scaled = tape.scale(id, weight)?;
        total_id = tape.add(total_id, scaled)?;
    }
    let value = tape.scalar_value(total_id)?;
    report.total = value;

    let recomputed = report.weighted_total(w);
    if (value - recomputed).abs() > 1e-10 {
        return Err(Error::Numeric(format!(
            "composite total {value} diverged from the weighted sum of terms {recomputed}"
        )));
    }

    Ok((value, report, laplacian_used, tape, total_id, leaf_ids))
}

/// Scenario/label consistency: unlabelled scenarios must never see target
/// labels inside a training batch.
fn validate_batch_labels(batch: &Batch, scenario: Scenario) -> Result<()> {
    match scenario {
        Scenario::Uda | Scenario::UnsupDlstl => {
            let leaked = batch.labelled_rows_in_domain(Domain::Target);
            if !leaked.is_empty() {
                return Err(Error::Config(format!(
                    "{} batches must not carry target labels (rows {leaked:?})",
                    scenario.name()
                )));
            }
        }
        Scenario::SemiDlstl { .. } => {}
    }
    for (i, d) in batch.domain.iter().enumerate() {
        if *d == Domain::Source && batch.labels[i].is_none() {
            return Err(Error::Config(format!("source row {i} is unlabelled")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchSpec;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn arch(ae: bool, target_classes: usize) -> ArchSpec {
        ArchSpec {
            input_dim: 5,
            hidden: vec![6],
            feat_dim: 4,
            cfs_dim: 3,
            source_classes: 3,
            target_classes,
            ae_decoder: ae,
        }
    }

    fn random_batch(
        n_source: usize,
        n_target: usize,
        source_classes: usize,
        target_labels: Option<usize>,
        seed: u64,
    ) -> Batch {
        let mut rng = stream_rng(seed, "test.batch");
        let n = n_source + n_target;
        let x = Matrix::from_vec(n, 5, (0..n * 5).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut labels = Vec::new();
        let mut domain = Vec::new();
        for _ in 0..n_source {
            labels.push(Some(rng.gen_range(0..source_classes)));
            domain.push(Domain::Source);
        }
        for _ in 0..n_target {
            labels.push(target_labels.map(|c| rng.gen_range(0..c)));
            domain.push(Domain::Target);
        }
        Batch { x, labels, domain }
    }

    #[test]
    fn test_reduction_to_supervised_only() {
        // With all betas at zero and no extras the total is the supervised
        // cross-entropy alone.
        let arch = arch(false, 0);
        let params = ModelParams::init(&arch, &mut stream_rng(1, "init")).unwrap();
        let weights = LossWeights {
            beta_c: 0.0,
            beta_m: 0.0,
            ..Default::default()
        };
        let graph = GraphConfig::default();
        let ctx = ObjectiveContext {
            scenario: Scenario::UnsupDlstl,
            variant: Variant::CfsmMinusGraph,
            weights: &weights,
            graph: &graph,
            graph_override: None,
            ae_target_override: None,
        };
        let batch = random_batch(4, 4, 3, None, 2);
        let out = composite_objective(&batch, &params, &ctx).unwrap();
        let sup = out.report.supervised.unwrap();
        let trip = out.report.triplet.unwrap();
        assert!((out.total - (sup + trip)).abs() < 1e-12);
        assert!(out.report.factorisation.is_some());
    }

    #[test]
    fn test_identical_rows_zero_graph_term() {
        let arch = arch(false, 0);
        let params = ModelParams::init(&arch, &mut stream_rng(3, "init")).unwrap();
        let weights = LossWeights::default();
        let graph = GraphConfig::default();
        let ctx = ObjectiveContext {
            scenario: Scenario::UnsupDlstl,
            variant: Variant::Cfsm,
            weights: &weights,
            graph: &graph,
            graph_override: None,
            ae_target_override: None,
        };
        let mut batch = random_batch(3, 3, 3, None, 4);
        // Make every row identical: the graph energy over identical features
        // vanishes.
        let row: Vec<f64> = batch.x.row(0).to_vec();
        for r in 1..batch.x.rows() {
            for (c, &v) in row.iter().enumerate() {
                batch.x.set(r, c, v);
            }
        }
        for l in batch.labels.iter_mut().take(3) {
            *l = Some(1);
        }
        let out = composite_objective(&batch, &params, &ctx).unwrap();
        assert!(out.report.graph.unwrap().abs() < 1e-10);
        let lap = out.laplacian.unwrap();
        assert_eq!(lap.rows(), batch.len());
    }

    #[test]
    fn test_total_matches_standalone_term_sum() {
        let arch = arch(false, 0);
        let params = ModelParams::init(&arch, &mut stream_rng(5, "init")).unwrap();
        let weights = LossWeights {
            beta_c: 0.7,
            beta_m: 0.2,
            ..Default::default()
        };
        let graph = GraphConfig::default();
        let ctx = ObjectiveContext {
            scenario: Scenario::UnsupDlstl,
            variant: Variant::Cfsm,
            weights: &weights,
            graph: &graph,
            graph_override: None,
            ae_target_override: None,
        };
        let batch = random_batch(3, 3, 3, None, 6);
        let out = composite_objective(&batch, &params, &ctx).unwrap();
        let manual = out.report.supervised.unwrap()
            + out.report.triplet.unwrap()
            + 0.7 * out.report.factorisation.unwrap()
            + 0.2 * out.report.graph.unwrap();
        assert!((out.total - manual).abs() < 1e-10);
    }

    #[test]
    fn test_unsup_rejects_target_labels() {
        let arch = arch(false, 0);
        let params = ModelParams::init(&arch, &mut stream_rng(7, "init")).unwrap();
        let weights = LossWeights::default();
        let graph = GraphConfig::default();
        let ctx = ObjectiveContext {
            scenario: Scenario::UnsupDlstl,
            variant: Variant::Cfsm,
            weights: &weights,
            graph: &graph,
            graph_override: None,
            ae_target_override: None,
        };
        let batch = random_batch(2, 2, 3, Some(2), 8);
        let err = composite_objective(&batch, &params, &ctx).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn test_stop_gradient_keeps_cfs_params_out_of_graph_term() {
        // Graph-only objective: gradients flow into the extractor through F,
        // never into the CFS layer through the Laplacian.
        let arch = arch(false, 0);
        let params = ModelParams::init(&arch, &mut stream_rng(9, "init")).unwrap();
        let weights = LossWeights {
            beta_c: 0.0,
            beta_m: 1.0,
            ..Default::default()
        };
        let graph = GraphConfig::default();
        // SourcePlusRegs under UnsupDlstl with beta_c = 0 leaves supervised,
        // triplet, factorisation(0-weighted) and graph; instead isolate the
        // graph by zeroing the other weights is not possible for supervised,
        // so check gradient structure on the full objective with the graph
        // dominating: compare cfs gradients with beta_m on and off. They must
        // be identical because the graph term contributes nothing to theta_C.
        let batch = random_batch(3, 3, 3, None, 10);
        let ctx_on = ObjectiveContext {
            scenario: Scenario::UnsupDlstl,
            variant: Variant::Cfsm,
            weights: &weights,
            graph: &graph,
            graph_override: None,
            ae_target_override: None,
        };
        let weights_off = LossWeights {
            beta_c: 0.0,
            beta_m: 0.0,
            ..Default::default()
        };
        let ctx_off = ObjectiveContext {
            scenario: Scenario::UnsupDlstl,
            variant: Variant::Cfsm,
            weights: &weights_off,
            graph: &graph,
            graph_override: None,
            ae_target_override: None,
        };
        let on = composite_objective(&batch, &params, &ctx_on).unwrap();
        let off = composite_objective(&batch, &params, &ctx_off).unwrap();
        // Entries 2 and 3 of a single-hidden-layer net are cfs.weight and
        // cfs.bias (after extractor.0.weight, extractor.0.bias).
        let names: Vec<String> = params.entries().iter().map(|(n, _)| n.clone()).collect();
        let cfs_w = names.iter().position(|n| n == "cfs.weight").unwrap();
        let cfs_b = names.iter().position(|n| n == "cfs.bias").unwrap();
        let ext_w = names.iter().position(|n| n == "extractor.0.weight").unwrap();
        assert!(on.grads[cfs_w].as_ref().unwrap().bits_eq(off.grads[cfs_w].as_ref().unwrap()));
        assert!(on.grads[cfs_b].as_ref().unwrap().bits_eq(off.grads[cfs_b].as_ref().unwrap()));
        // The extractor gradient does feel the graph term.
        assert!(!on.grads[ext_w].as_ref().unwrap().bits_eq(off.grads[ext_w].as_ref().unwrap()));
        // And the loss value itself moves with beta_m.
        assert!((on.total - off.total).abs() > 1e-9);
    }

    #[test]
    fn test_semi_uses_target_head_for_labelled_target_rows() {
        let arch = arch(false, 4);
        let params = ModelParams::init(&arch, &mut stream_rng(11, "init")).unwrap();
        let weights = LossWeights::default();
        let graph = GraphConfig::default();
        let ctx = ObjectiveContext {
            scenario: Scenario::SemiDlstl { k: 2 },
            variant: Variant::Cfsm,
            weights: &weights,
            graph: &graph,
            graph_override: None,
            ae_target_override: None,
        };
        let batch = random_batch(3, 3, 3, Some(4), 12);
        let out = composite_objective(&batch, &params, &ctx).unwrap();
        assert!(out.report.supervised.is_some());
        let names: Vec<String> = params.entries().iter().map(|(n, _)| n.clone()).collect();
        let th = names.iter().position(|n| n == "target_head.weight").unwrap();
        assert!(out.grads[th].is_some());
    }

    #[test]
    fn test_variant_isolation_of_terms() {
        let cases: Vec<(Variant, Vec<&str>)> = vec![
            (Variant::Cfsm, vec!["supervised", "factorisation", "graph", "triplet"]),
            (Variant::CfsmMinusGraph, vec!["supervised", "factorisation", "triplet"]),
            (
                Variant::CfsmClassicGraph,
                vec!["supervised", "factorisation", "graph", "triplet"],
            ),
            (Variant::SourceOnly, vec!["supervised", "triplet"]),
            (Variant::Ae, vec!["supervised", "triplet", "ae"]),
        ];
        for (variant, expected) in cases {
            let needs_ae = variant.needs_ae_decoder();
            let arch = arch(needs_ae, 0);
            let params = ModelParams::init(&arch, &mut stream_rng(13, "init")).unwrap();
            let weights = LossWeights::default();
            let graph = GraphConfig::default();
            let ctx = ObjectiveContext {
                scenario: Scenario::UnsupDlstl,
                variant,
                weights: &weights,
                graph: &graph,
                graph_override: None,
                ae_target_override: None,
            };
            let batch = match variant.stream_mode() {
                crate::data::StreamMode::SourceOnly => random_batch(6, 0, 3, None, 14),
                _ => random_batch(3, 3, 3, None, 14),
            };
            let out = composite_objective(&batch, &params, &ctx).unwrap();
            let mut active = out.report.active_terms();
            active.sort_unstable();
            let mut expected = expected;
            expected.sort_unstable();
            assert_eq!(active, expected, "variant {variant:?}");
        }
    }
}
