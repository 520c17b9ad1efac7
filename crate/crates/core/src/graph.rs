//! Per-minibatch similarity graphs and the top-down Laplacian regulariser.
//!
//! The graph is built on the CFS activations of the current batch with a
//! symmetric kNN rule and a heat kernel, and the resulting Laplacian
//! regularises the feature extractor through Tr(F' L F). The Laplacian is
//! treated as a constant on the tape: gradients reach F only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, TapeId};

/// Similarity graph construction parameters for one batch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphSpec {
    /// Neighbours per node before symmetrisation.
    pub k: usize,
    /// Heat kernel bandwidth.
    pub sigma: f64,
    /// Use the symmetric normalised Laplacian instead of D - W.
    pub normalized: bool,
}

impl GraphSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("graph k must be >= 1".into()));
        }
        if self.k >= n {
            return Err(Error::Config(format!(
                "graph k = {} must be smaller than the batch size {}",
                self.k, n
            )));
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return Err(Error::Config(format!("graph sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Graph construction policy carried by the experiment config. The
/// per-batch `GraphSpec` is resolved from it: k is clamped to N-1 and the
/// median heuristic picks the bandwidth from the batch itself.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub bandwidth: Bandwidth,
    #[serde(default)]
    pub normalized: bool,
    /// Divide the graph loss by the batch size for batch-size-invariant
    /// sweeps; off by default.
    #[serde(default)]
    pub normalize_by_n: bool,
}

fn default_k() -> usize {
    8
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            k: default_k(),
            bandwidth: Bandwidth::MEDIAN,
            normalized: false,
            normalize_by_n: false,
        }
    }
}

/// Kernel bandwidth policy: a fixed value, the per-batch median heuristic,
/// or the median scaled by a factor (sharper kernels suppress cross-cluster
/// edges, which the plain median leaves at moderate weight). Serialises as a
/// bare number, the string "median", or {"median_scaled": factor}.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Median(MedianTag),
    MedianScaled { median_scaled: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MedianTag {
    Median,
}

impl Bandwidth {
    pub const MEDIAN: Bandwidth = Bandwidth::Median(MedianTag::Median);
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::MEDIAN
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("graph k must be >= 1".into()));
        }
        match self.bandwidth {
            Bandwidth::Fixed(s) if !s.is_finite() || s <= 0.0 => {
                return Err(Error::Config(format!("fixed graph bandwidth must be positive, got {s}")));
            }
            Bandwidth::MedianScaled { median_scaled } if !median_scaled.is_finite() || median_scaled <= 0.0 => {
                return Err(Error::Config(format!(
                    "median_scaled factor must be positive, got {median_scaled}"
                )));
            }
            _ => {}
        }
        Ok(())
    }

    /// Build the batch Laplacian for the given points.
    pub fn batch_laplacian(&self, points: &Matrix) -> Result<Laplacian> {
        let n = points.rows();
        if n < 2 {
            return Err(Error::Data(format!("graph needs at least 2 batch rows, got {n}")));
        }
        let sigma = match self.bandwidth {
            Bandwidth::Fixed(s) => s,
            Bandwidth::Median(_) => median_pairwise_distance(points),
            Bandwidth::MedianScaled { median_scaled } => median_scaled * median_pairwise_distance(points),
        };
        let spec = GraphSpec {
            k: self.k.min(n - 1),
            sigma,
            normalized: self.normalized,
        };
        let w = build_similarity_graph(points, &spec)?;
        laplacian(&w, self.normalized)
    }
}

/// A batch Laplacian together with the weight matrix it came from.
#[derive(Clone, Debug)]
pub struct Laplacian {
    pub l: Matrix,
    pub w: Matrix,
}

impl Laplacian {
    pub fn rows(&self) -> usize {
        self.l.rows()
    }
}

/// Median pairwise Euclidean distance between rows, the default bandwidth.
/// Falls back to the mean distance and then to 1.0 when the batch collapses
/// to coincident points, so the returned bandwidth is always positive.
pub fn median_pairwise_distance(points: &Matrix) -> f64 {
    let n = points.rows();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(points.row_sq_distance(i, j).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    if median > 0.0 {
        return median;
    }
    let mean = dists.iter().sum::<f64>() / dists.len() as f64;
    if mean > 0.0 {
        mean
    } else {
        1.0
    }
}

/// Symmetric kNN graph with heat-kernel weights:
/// W_ij = exp(-|f_i - f_j|^2 / (2 sigma^2)) when j is among the k nearest
/// neighbours of i or vice versa, with a zero diagonal.
pub fn build_similarity_graph(points: &Matrix, spec: &GraphSpec) -> Result<Matrix> {
    let n = points.rows();
    if n < 2 {
        return Err(Error::Data(format!(
            "similarity graph needs at least 2 rows, got {n}"
        )));
    }
    spec.validate(n)?;

    let mut sq = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = points.row_sq_distance(i, j);
            sq.set(i, j, d);
            sq.set(j, i, d);
        }
    }

    // k nearest per row, ties broken by lower index.
    let mut neighbour = vec![vec![false; n]; n];
    for (i, row) in neighbour.iter_mut().enumerate() {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            sq.get(i, a)
                .partial_cmp(&sq.get(i, b))
                .unwrap()
                .then(a.cmp(&b))
        });
        for &j in order.iter().take(spec.k) {
            row[j] = true;
        }
    }

    let denom = 2.0 * spec.sigma * spec.sigma;
    let mut w = Matrix::zeros(n, n);
    #[allow(clippy::needless_range_loop)]
    for i in 0..n {
        for j in (i + 1)..n {
            if neighbour[i][j] || neighbour[j][i] {
                let weight = (-sq.get(i, j) / denom).exp();
                w.set(i, j, weight);
                w.set(j, i, weight);
            }
        }
    }
    Ok(w)
}

/// Laplacian of a symmetric nonnegative weight matrix with zero diagonal.
/// Unnormalized: L = D - W. Normalized: L = I - D^{-1/2} W D^{-1/2}, with
/// isolated nodes contributing zero off-diagonal.
pub fn laplacian(w: &Matrix, normalized: bool) -> Result<Laplacian> {
    let n = w.rows();
    if w.cols() != n {
        return Err(Error::dimension("laplacian", w.shape_string(), "square".to_string()));
    }
    for i in 0..n {
        if w.get(i, i) != 0.0 {
            return Err(Error::Contract(format!("weight matrix has nonzero diagonal at {i}")));
        }
        for j in 0..n {
            let v = w.get(i, j);
            if v < 0.0 {
                return Err(Error::Contract(format!("negative weight at ({i},{j}): {v}")));
            }
            if (v - w.get(j, i)).abs() > 1e-12 {
                return Err(Error::Contract(format!("weight matrix asymmetric at ({i},{j})")));
            }
        }
    }

    let degrees: Vec<f64> = (0..n).map(|i| w.row(i).iter().sum()).collect();
    let mut l = Matrix::zeros(n, n);
    if normalized {
        let inv_sqrt: Vec<f64> = degrees
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
            .collect();
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    // I - D^{-1/2} W D^{-1/2}: the identity keeps a unit
                    // diagonal even for isolated nodes.
                    l.set(i, j, 1.0);
                } else {
                    l.set(i, j, -inv_sqrt[i] * w.get(i, j) * inv_sqrt[j]);
                }
            }
        }
    } else {
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    l.set(i, j, degrees[i]);
                } else {
                    l.set(i, j, -w.get(i, j));
                }
            }
        }
    }
    Ok(Laplacian { l, w: w.clone() })
}

/// Tr(F' L F) on the tape. L enters as a constant, so the gradient flows
/// into F only (stop-gradient through the graph construction).
pub fn graph_loss(tape: &mut Tape, f: TapeId, lap: &Laplacian) -> Result<TapeId> {
    if tape.value(f).rows() != lap.rows() {
        return Err(Error::dimension(
            "graph_loss",
            tape.value(f).shape_string(),
            lap.l.shape_string(),
        ));
    }
    let l_const = tape.constant(lap.l.clone())?;
    let lf = tape.matmul(l_const, f)?;
    let prod = tape.mul(f, lf)?;
    tape.sum(prod)
}

/// Plain-value Tr(F' L F), used by diagnostics and tests.
pub fn graph_energy(f: &Matrix, lap: &Laplacian) -> Result<f64> {
    if f.rows() != lap.rows() {
        return Err(Error::dimension("graph_energy", f.shape_string(), lap.l.shape_string()));
    }
    let lf = lap.l.matmul(f)?;
    Ok(f.hadamard(&lf)?.sum())
}
