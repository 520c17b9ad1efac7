//! Classification and retrieval metrics, CFS activation diagnostics and the
//! per-factor top-activation inspector.

use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Fraction of rows whose argmax logit equals the label; argmax ties break
/// toward the lowest class index.
pub fn classification_accuracy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::dimension(
            "classification_accuracy",
            format!("{} rows", logits.rows()),
            format!("{} labels", labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::Data("accuracy over an empty set is undefined".into()));
    }
    let mut correct = 0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub rank1: f64,
    pub map: f64,
    pub per_query_ap: Vec<f64>,
}

/// Euclidean-distance retrieval: R1 is the fraction of queries whose nearest
/// gallery item shares the id; AP is the mean of precision-at-rank over the
/// relevant hits; mAP is the mean AP. Distance ties break toward the lower
/// gallery index.
pub fn retrieval_metrics(
    query_f: &Matrix,
    query_ids: &[usize],
    gallery_f: &Matrix,
    gallery_ids: &[usize],
) -> Result<RetrievalResult> {
    if query_f.rows() != query_ids.len() {
        return Err(Error::dimension(
            "retrieval_metrics",
            format!("{} query rows", query_f.rows()),
            format!("{} query ids", query_ids.len()),
        ));
    }
    if gallery_f.rows() != gallery_ids.len() {
        return Err(Error::dimension(
            "retrieval_metrics",
            format!("{} gallery rows", gallery_f.rows()),
            format!("{} gallery ids", gallery_ids.len()),
        ));
    }
    if query_f.cols() != gallery_f.cols() {
        return Err(Error::dimension(
            "retrieval_metrics",
            query_f.shape_string(),
            gallery_f.shape_string(),
        ));
    }
    if query_ids.is_empty() {
        return Err(Error::Data("retrieval needs at least one query".into()));
    }
    for &id in query_ids {
        if !gallery_ids.contains(&id) {
            return Err(Error::Data(format!("query id {id} absent from the gallery")));
        }
    }

    let mut rank1_hits = 0usize;
    let mut per_query_ap = Vec::with_capacity(query_ids.len());
    for (qi, &qid) in query_ids.iter().enumerate() {
        let mut order: Vec<usize> = (0..gallery_ids.len()).collect();
        let dist: Vec<f64> = (0..gallery_ids.len())
            .map(|gi| {
                query_f
                    .row(qi)
                    .iter()
                    .zip(gallery_f.row(gi).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .collect();
        order.sort_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap().then(a.cmp(&b)));

        if gallery_ids[order[0]] == qid {
            rank1_hits += 1;
        }
        let relevant = gallery_ids.iter().filter(|&&g| g == qid).count();
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank0, &gi) in order.iter().enumerate() {
            if gallery_ids[gi] == qid {
                hits += 1;
                precision_sum += hits as f64 / (rank0 + 1) as f64;
            }
        }
        per_query_ap.push(precision_sum / relevant as f64);
    }
    let map = per_query_ap.iter().sum::<f64>() / per_query_ap.len() as f64;
    Ok(RetrievalResult {
        rank1: rank1_hits as f64 / query_ids.len() as f64,
        map,
        per_query_ap,
    })
}

/// Uniform-bin histogram over [0,1] plus the mid-mass summary: the fraction
/// of activations strictly inside (0.1, 0.9). Low mid-mass means a
/// near-binary code.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mid_mass: f64,
}

pub fn activation_histogram(fc: &Matrix, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::Contract(format!("need at least 2 bins, got {bins}")));
    }
    if fc.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Contract("activations must lie in [0,1]".into()));
    }
    let edges: Vec<f64> = (0..=bins).map(|b| b as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    let mut mid = 0usize;
    for &v in fc.data() {
        let bin = ((v * bins as f64) as usize).min(bins - 1);
        counts[bin] += 1;
        if v > 0.1 && v < 0.9 {
            mid += 1;
        }
    }
    Ok(Histogram {
        edges,
        counts,
        mid_mass: mid as f64 / fc.len() as f64,
    })
}

pub fn mid_mass(fc: &Matrix) -> f64 {
    let mid = fc.data().iter().filter(|&&v| v > 0.1 && v < 0.9).count();
    mid as f64 / fc.len() as f64
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TopEntry {
    pub index: usize,
    pub domain: Domain,
    pub activation: f64,
}

/// For each CFS factor, the k samples with the highest activation,
/// descending, ties toward the lower row index. Domain tags ride along so
/// source and target exemplars can be told apart.
pub fn top_k_by_factor(fc: &Matrix, domains: &[Domain], k: usize) -> Result<Vec<Vec<TopEntry>>> {
    let n = fc.rows();
    if domains.len() != n {
        return Err(Error::dimension(
            "top_k_by_factor",
            format!("{n} rows"),
            format!("{} domain tags", domains.len()),
        ));
    }
    if k > n {
        return Err(Error::Contract(format!("k = {k} exceeds sample count {n}")));
    }
    let mut out = Vec::with_capacity(fc.cols());
    for factor in 0..fc.cols() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            fc.get(b, factor)
                .partial_cmp(&fc.get(a, factor))
                .unwrap()
                .then(a.cmp(&b))
        });
        out.push(
            order
                .into_iter()
                .take(k)
                .map(|i| TopEntry {
                    index: i,
                    domain: domains[i],
                    activation: fc.get(i, factor),
                })
                .collect(),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn test_accuracy_onehot_and_tie_rule() {
        let logits = mat(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(classification_accuracy(&logits, &[1, 0]).unwrap(), 1.0);

        // All-equal logits: tie-break picks class 0 for every row.
        let flat = Matrix::zeros(4, 3);
        let labels = [0usize, 1, 0, 2];
        let expected = 2.0 / 4.0;
        assert_eq!(classification_accuracy(&flat, &labels).unwrap(), expected);
    }

    #[test]
    fn test_accuracy_matches_bruteforce_argmax() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(3, "test.acc");
        let n = 10;
        let c = 5;
        let logits = Matrix::from_vec(n, c, (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let brute = (0..n)
            .filter(|&r| {
                let row = logits.row(r);
                let mut best = 0;
                for c in 1..row.len() {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best == labels[r]
            })
            .count() as f64
            / n as f64;
        assert_eq!(classification_accuracy(&logits, &labels).unwrap(), brute);
    }

    #[test]
    fn test_retrieval_self_match_is_perfect() {
        let pool = mat(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let ids = [0usize, 1, 2];
        let r = retrieval_metrics(&pool, &ids, &pool, &ids).unwrap();
        assert_eq!(r.rank1, 1.0);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn test_retrieval_hand_ap_cases() {
        // Single query; gallery at distances 1 < 2 < 3 from it.
        // Relevant at ranks 1 and 3: AP = (1/1 + 2/3)/2 = 5/6.
        let query = mat(&[vec![0.0]]);
        let gallery = mat(&[vec![1.0], vec![2.0], vec![3.0]]);
        let r = retrieval_metrics(&query, &[5], &gallery, &[5, 6, 5]).unwrap();
        assert!((r.per_query_ap[0] - 5.0 / 6.0).abs() < 1e-12);
        assert!((r.map - 0.8333).abs() < 1e-4);
        assert_eq!(r.rank1, 1.0);

        // Relevant at ranks 2 and 3: AP = (1/2 + 2/3)/2 = 7/12.
        let r = retrieval_metrics(&query, &[5], &gallery, &[6, 5, 5]).unwrap();
        assert!((r.per_query_ap[0] - 7.0 / 12.0).abs() < 1e-12);
        assert!((r.map - 0.5833).abs() < 1e-4);
        assert_eq!(r.rank1, 0.0);
    }

    #[test]
    fn test_retrieval_missing_id_names_it() {
        let query = mat(&[vec![0.0]]);
        let gallery = mat(&[vec![1.0]]);
        let err = retrieval_metrics(&query, &[9], &gallery, &[1]).unwrap_err().to_string();
        assert!(err.contains("9"), "{err}");
    }

    #[test]
    fn test_map_is_mean_of_aps() {
        let query = mat(&[vec![0.0], vec![10.0]]);
        let gallery = mat(&[vec![1.0], vec![9.0], vec![4.0]]);
        let r = retrieval_metrics(&query, &[1, 2], &gallery, &[1, 2, 1]).unwrap();
        let mean = r.per_query_ap.iter().sum::<f64>() / 2.0;
        assert!((r.map - mean).abs() < 1e-12);
    }

    #[test]
    fn test_histogram_point_mass_and_bimodal() {
        let half = Matrix::filled(2, 5, 0.5);
        let h = activation_histogram(&half, 10).unwrap();
        assert_eq!(h.counts[5], 10);
        assert_eq!(h.counts.iter().sum::<usize>(), 10);
        assert_eq!(h.mid_mass, 1.0);

        let mut bimodal = Matrix::zeros(1, 4);
        bimodal.set(0, 0, 0.01);
        bimodal.set(0, 1, 0.02);
        bimodal.set(0, 2, 0.99);
        bimodal.set(0, 3, 1.0);
        let h = activation_histogram(&bimodal, 10).unwrap();
        assert_eq!(h.mid_mass, 0.0);
        assert_eq!(h.counts[9], 2);
    }

    #[test]
    fn test_histogram_against_hand_binning() {
        let values = mat(&[vec![0.05, 0.15, 0.85, 0.5, 0.1]]);
        let h = activation_histogram(&values, 10).unwrap();
        // 0.1 lands in bin 1 by the floor rule.
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[1], 2);
        assert_eq!(h.counts[5], 1);
        assert_eq!(h.counts[8], 1);
        // 0.1 is not strictly inside (0.1, 0.9).
        assert!((h.mid_mass - 3.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn test_mid_mass_monotone_under_push_to_extremes() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(7, "test.midmass");
        let base: Vec<f64> = (0..60).map(|_| rng.gen_range(0.0..1.0)).collect();
        let m0 = mid_mass(&Matrix::from_vec(6, 10, base.clone()).unwrap());
        // Push every element toward its nearest extreme by a factor.
        for &gamma in &[0.8, 0.5, 0.2] {
            let pushed: Vec<f64> = base
                .iter()
                .map(|&v| if v < 0.5 { v * gamma } else { 1.0 - (1.0 - v) * gamma })
                .collect();
            let m = mid_mass(&Matrix::from_vec(6, 10, pushed).unwrap());
            assert!(m <= m0 + 1e-12);
        }
    }

    #[test]
    fn test_top_k_full_sort_and_ties() {
        let fc = mat(&[
            vec![0.1, 0.9],
            vec![0.8, 0.9],
            vec![0.8, 0.2],
            vec![0.3, 0.5],
        ]);
        let domains = [Domain::Source, Domain::Source, Domain::Target, Domain::Target];
        let top = top_k_by_factor(&fc, &domains, 4).unwrap();
        // Factor 0: 0.8 (row 1 before row 2 by the tie rule), 0.3, 0.1.
        let idx0: Vec<usize> = top[0].iter().map(|e| e.index).collect();
        assert_eq!(idx0, vec![1, 2, 3, 0]);
        // Factor 1: rows 0 and 1 tie at 0.9, lower index first.
        let idx1: Vec<usize> = top[1].iter().map(|e| e.index).collect();
        assert_eq!(idx1, vec![0, 1, 3, 2]);
        assert_eq!(top[0][0].domain, Domain::Source);
        assert!(top_k_by_factor(&fc, &domains, 5).is_err());
    }

    #[test]
    fn test_top_k_saturated_sample_leads() {
        let mut fc = Matrix::filled(5, 2, 0.4);
        fc.set(3, 1, 0.999);
        let domains = [Domain::Source; 5];
        let top = top_k_by_factor(&fc, &domains, 2).unwrap();
        assert_eq!(top[1][0].index, 3);
    }

    #[test]
    fn test_retrieval_permutation_invariance() {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(23, "test.perm");
        for _ in 0..10 {
            let nq = rng.gen_range(2..6);
            let ng = rng.gen_range(4..12);
            let dim = 3;
            let query = Matrix::from_vec(nq, dim, (0..nq * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let gallery_ids: Vec<usize> = (0..ng).map(|_| rng.gen_range(0..3)).collect();
            let query_ids: Vec<usize> = (0..nq).map(|i| gallery_ids[i % ng]).collect();
            let gallery = Matrix::from_vec(ng, dim, (0..ng * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let base = retrieval_metrics(&query, &query_ids, &gallery, &gallery_ids).unwrap();

            let mut perm: Vec<usize> = (0..ng).collect();
            perm.shuffle(&mut rng);
            let mut g2 = Matrix::zeros(ng, dim);
            let mut ids2 = vec![0usize; ng];
            for (new_row, &old_row) in perm.iter().enumerate() {
                for c in 0..dim {
                    g2.set(new_row, c, gallery.get(old_row, c));
                }
                ids2[new_row] = gallery_ids[old_row];
            }
            let permuted = retrieval_metrics(&query, &query_ids, &g2, &ids2).unwrap();
            assert!((base.rank1 - permuted.rank1).abs() < 1e-12);
            assert!((base.map - permuted.map).abs() < 1e-12);
        }
    }

    #[test]
    fn test_ap_monotone_when_relevant_moves_up() {
        // Moving any relevant item strictly up a ranking never decreases AP.
        // Construct a gallery on a line so ranks are explicit.
        let query = mat(&[vec![0.0]]);
        let ids_before = [6usize, 5, 6, 5];
        let gallery = mat(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]);
        let before = retrieval_metrics(&query, &[5], &gallery, &ids_before).unwrap();
        // Swap the relevant item at rank 2 up to rank 1.
        let ids_after = [5usize, 6, 6, 5];
        let after = retrieval_metrics(&query, &[5], &gallery, &ids_after).unwrap();
        assert!(after.per_query_ap[0] >= before.per_query_ap[0]);
    }
}
