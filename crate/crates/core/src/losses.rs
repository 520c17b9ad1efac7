//! Loss terms of the composite objective: supervised cross-entropy with
//! label smoothing, the unsupervised low-entropy factorisation loss on the
//! CFS activations, the top-down graph loss, target prediction entropy,
//! batch-hard triplet loss, the AE reconstruction prior, and the
//! auto-balancing heuristic for the beta weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, TapeId, EPS_CLIP};

/// Balancing weights and loss hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub beta_c: f64,
    #[serde(default = "one")]
    pub beta_m: f64,
    /// Weight of the target softmax-entropy term (UDA only).
    #[serde(default = "one")]
    pub beta_target_entropy: f64,
    /// Weight of the reconstruction term (AE ablation only).
    #[serde(default = "one")]
    pub beta_ae: f64,
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default = "default_margin")]
    pub triplet_margin: f64,
    /// Add the -(1-p)log(1-p) complement to the factorisation loss.
    #[serde(default)]
    pub binary_entropy: bool,
}

fn one() -> f64 {
    1.0
}

fn default_margin() -> f64 {
    0.3
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta_c: 1.0,
            beta_m: 1.0,
            beta_target_entropy: 1.0,
            beta_ae: 1.0,
            label_smoothing: 0.0,
            triplet_margin: 0.3,
            binary_entropy: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_c", self.beta_c),
            ("beta_m", self.beta_m),
            ("beta_target_entropy", self.beta_target_entropy),
            ("beta_ae", self.beta_ae),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must be in [0,1), got {}",
                self.label_smoothing
            )));
        }
        if !self.triplet_margin.is_finite() || self.triplet_margin <= 0.0 {
            return Err(Error::Config(format!(
                "triplet_margin must be positive, got {}",
                self.triplet_margin
            )));
        }
        Ok(())
    }
}

/// Raw per-term values for one step plus the weighted total. Absent terms
/// stay `None` so variant isolation is visible in the logs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub supervised: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub factorisation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_entropy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triplet: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ae: Option<f64>,
}

impl LossReport {
    /// Weighted sum of the active terms; the invariant `total == weighted`
    /// is asserted on every logged step.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        let mut total = 0.0;
        if let Some(v) = self.supervised {
            total += v;
        }
        if let Some(v) = self.factorisation {
            total += w.beta_c * v;
        }
        if let Some(v) = self.graph {
            total += w.beta_m * v;
        }
        if let Some(v) = self.target_entropy {
            total += w.beta_target_entropy * v;
        }
        if let Some(v) = self.triplet {
            total += v;
        }
        if let Some(v) = self.ae {
            total += w.beta_ae * v;
        }
        total
    }

    pub fn active_terms(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.supervised.is_some() {
            out.push("supervised");
        }
        if self.factorisation.is_some() {
            out.push("factorisation");
        }
        if self.graph.is_some() {
            out.push("graph");
        }
        if self.target_entropy.is_some() {
            out.push("target_entropy");
        }
        if self.triplet.is_some() {
            out.push("triplet");
        }
        if self.ae.is_some() {
            out.push("ae");
        }
        out
    }
}

/// Mean cross-entropy with label smoothing:
/// q = (1 - eps) onehot + eps / C, loss = mean_rows(-sum_c q_c log p_c).
pub fn supervised_xent(tape: &mut Tape, logits: TapeId, labels: &[usize], smoothing: f64) -> Result<TapeId> {
    let (n, c) = tape.value(logits).shape();
    if labels.len() != n {
        return Err(Error::dimension("supervised_xent", format!("{n} rows"), format!("{} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::Data("supervised_xent needs at least one row".into()));
    }
    let mut q = Matrix::filled(n, c, smoothing / c as f64);
    for (r, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::Data(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        q.set(r, label, q.get(r, label) + 1.0 - smoothing);
    }
    let q_const = tape.constant(q)?;
    let log_probs = tape.row_log_softmax(logits)?;
    let weighted = tape.mul(q_const, log_probs)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0 / n as f64)
}

/// Unsupervised factorisation loss on the CFS activations:
/// -(1/N) sum_i <F_Ci, log F_Ci>, applied to the whole batch. With
/// `binary_entropy` the -(1-p)log(1-p) complement is added per unit.
pub fn factorisation_entropy(tape: &mut Tape, fc: TapeId, binary_entropy: bool) -> Result<TapeId> {
    let value = tape.value(fc);
    let n = value.rows();
    if value.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::Contract(
            "factorisation_entropy requires activations in [0,1]".into(),
        ));
    }
    // Guard the log; sigmoid outputs are already inside the clip band.
    let safe = tape.clamp(fc, EPS_CLIP, 1.0 - EPS_CLIP)?;
    let log_p = tape.log(safe)?;
    let p_log_p = tape.mul(fc, log_p)?;
    let sum = tape.sum(p_log_p)?;
    let mut loss = tape.scale(sum, -1.0 / n as f64)?;
    if binary_entropy {
        let (rows, cols) = tape.value(fc).shape();
        let ones = tape.constant(Matrix::filled(rows, cols, 1.0))?;
        let q = tape.sub(ones, fc)?;
        let safe_q = tape.clamp(q, EPS_CLIP, 1.0 - EPS_CLIP)?;
        let log_q = tape.log(safe_q)?;
        let q_log_q = tape.mul(q, log_q)?;
        let sum_q = tape.sum(q_log_q)?;
        let comp = tape.scale(sum_q, -1.0 / n as f64)?;
        loss = tape.add(loss, comp)?;
    }
    Ok(loss)
}

/// Mean softmax prediction entropy over rows: -(1/N) sum p log p.
pub fn target_prediction_entropy(tape: &mut Tape, logits: TapeId) -> Result<TapeId> {
    let n = tape.value(logits).rows();
    if n == 0 {
        return Err(Error::Data("target_prediction_entropy needs at least one row".into()));
    }
    let log_p = tape.row_log_softmax(logits)?;
    let p = tape.exp(log_p)?;
    let p_log_p = tape.mul(p, log_p)?;
    let sum = tape.sum(p_log_p)?;
    tape.scale(sum, -1.0 / n as f64)
}

pub struct TripletOutcome {
    pub loss: TapeId,
    /// Anchors that had both a positive and a negative.
    pub anchors: usize,
    pub degenerate: bool,
}

/// Batch-hard triplet loss on Euclidean distances: per anchor, the farthest
/// same-label and nearest different-label rows form the triplet; the loss is
/// the mean hinge over valid anchors. A batch with no valid anchor yields a
/// zero constant and a warning.
pub fn triplet_loss(tape: &mut Tape, f: TapeId, labels: &[usize], margin: f64) -> Result<TripletOutcome> {
    let values = tape.value(f).clone();
    let n = values.rows();
    if labels.len() != n {
        return Err(Error::dimension("triplet_loss", format!("{n} rows"), format!("{} labels", labels.len())));
    }

    // Mining runs on detached values; the selection itself carries no
    // gradient, only the selected distances do.
    let mut dist = vec![vec![0.0f64; n]; n];
    #[allow(clippy::needless_range_loop)]
    for i in 0..n {
        for j in (i + 1)..n {
            let d = values.row_sq_distance(i, j).sqrt();
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut anchors = Vec::new();
    let mut pos_idx = Vec::new();
    let mut neg_idx = Vec::new();
    for a in 0..n {
        let mut hardest_pos: Option<(f64, usize)> = None;
        let mut hardest_neg: Option<(f64, usize)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                let better = match hardest_pos {
                    Some((d, _)) => dist[a][j] > d,
                    None => true,
                };
                if better {
                    hardest_pos = Some((dist[a][j], j));
                }
            } else {
                let better = match hardest_neg {
                    Some((d, _)) => dist[a][j] < d,
                    None => true,
                };
                if better {
                    hardest_neg = Some((dist[a][j], j));
                }
            }
        }
        if let (Some((_, p)), Some((_, ng))) = (hardest_pos, hardest_neg) {
            anchors.push(a);
            pos_idx.push(p);
            neg_idx.push(ng);
        }
    }

    if anchors.is_empty() {
        eprintln!("warning: triplet_loss batch has no valid anchor (all labels equal or all distinct); loss is 0");
        let zero = tape.constant(Matrix::scalar(0.0))?;
        return Ok(TripletOutcome {
            loss: zero,
            anchors: 0,
            degenerate: true,
        });
    }

    let a_rows = tape.gather_rows(f, &anchors)?;
    let p_rows = tape.gather_rows(f, &pos_idx)?;
    let n_rows = tape.gather_rows(f, &neg_idx)?;
    let cols = values.cols();
    let ones = tape.constant(Matrix::filled(cols, 1, 1.0))?;

    let mut row_distance = |x: TapeId, y: TapeId| -> Result<TapeId> {
        let diff = tape.sub(x, y)?;
        let sq = tape.mul(diff, diff)?;
        let row_sums = tape.matmul(sq, ones)?;
        // Tiny offset keeps the sqrt derivative finite at coincident rows.
        let shifted = tape.add_scalar(row_sums, 1e-12)?;
        tape.sqrt(shifted)
    };
    let d_pos = row_distance(a_rows, p_rows)?;
    let d_neg = row_distance(a_rows, n_rows)?;
    let gap = tape.sub(d_pos, d_neg)?;
    let shifted = tape.add_scalar(gap, margin)?;
    let hinge = tape.relu(shifted)?;
    let loss = tape.mean(hinge)?;
    Ok(TripletOutcome {
        loss,
        anchors: anchors.len(),
        degenerate: false,
    })
}

/// Mean squared reconstruction error against a stop-gradient feature target.
pub fn reconstruction_loss(tape: &mut Tape, reconstructed: TapeId, target_features: &Matrix) -> Result<TapeId> {
    if tape.value(reconstructed).shape() != target_features.shape() {
        return Err(Error::dimension(
            "reconstruction_loss",
            tape.value(reconstructed).shape_string(),
            target_features.shape_string(),
        ));
    }
    let target = tape.constant(target_features.clone())?;
    let diff = tape.sub(reconstructed, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// Snap to the nearest power of ten, the granularity the betas are quoted at.
fn snap_power_of_ten(x: f64) -> f64 {
    10f64.powi(x.log10().round() as i32)
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = values.len() / 2;
    Some(if values.len().is_multiple_of(2) {
        0.5 * (values[mid - 1] + values[mid])
    } else {
        values[mid]
    })
}

/// Rescale the regularisers to the supervised term's range: each beta is the
/// ratio of warm-up medians snapped to a power of ten. A zero median pins
/// that beta to zero with a warning. Non-beta fields are taken from `base`.
pub fn auto_balance(reports: &[LossReport], base: &LossWeights) -> Result<LossWeights> {
    if reports.is_empty() {
        return Err(Error::Contract("auto_balance needs at least one warm-up report".into()));
    }
    let mut sup: Vec<f64> = reports.iter().filter_map(|r| r.supervised).collect();
    let mut fact: Vec<f64> = reports.iter().filter_map(|r| r.factorisation).collect();
    let mut graph: Vec<f64> = reports.iter().filter_map(|r| r.graph).collect();

    let sup_med = median(&mut sup)
        .ok_or_else(|| Error::Contract("auto_balance needs a supervised term in the warm-up".into()))?;

    let mut weights = base.clone();
    match median(&mut fact) {
        Some(m) if m > 0.0 && sup_med > 0.0 => weights.beta_c = snap_power_of_ten(sup_med / m),
        Some(_) => {
            eprintln!("warning: auto_balance saw a zero factorisation median; beta_c set to 0");
            weights.beta_c = 0.0;
        }
        None => {}
    }
    match median(&mut graph) {
        Some(m) if m > 0.0 && sup_med > 0.0 => weights.beta_m = snap_power_of_ten(sup_med / m),
        Some(_) => {
            eprintln!("warning: auto_balance saw a zero graph median; beta_m set to 0");
            weights.beta_m = 0.0;
        }
        None => {}
    }
    Ok(weights)
}
