//! Community detection on estimated latent vectors and the evaluation
//! metrics used by the simulation studies: Lloyd's k-means with restarts,
//! the (unadjusted) Rand index, Pearson correlation over link
//! probabilities, and cross-method score centering.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A hard partition of `n` items into `k` clusters, labels in `0..k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub labels: Vec<usize>,
    pub k: usize,
}

impl Partition {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if k < 1 {
            return Err(Error::invalid("cluster count must be >= 1"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for k={k}"
            )));
        }
        Ok(Partition { labels, k })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Rescales every nonzero row to unit Euclidean norm; zero rows stay zero.
pub fn normalize_rows(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

/// Lloyd's k-means with k-means++ seeding, best of `restarts` runs by
/// within-cluster sum of squares. Deterministic given the seed; each restart
/// uses its own derived stream. An emptied cluster is reseeded at the point
/// farthest from its assigned centroid.
pub fn kmeans(x: &DMatrix<f64>, k: usize, restarts: usize, seed: u64) -> Result<Partition> {
    let n = x.nrows();
    if k < 1 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k={k} exceeds n={n}")));
    }
    let restarts = restarts.max(1);

    let mut best: Option<(f64, Vec<usize>)> = None;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        let (labels, wcss) = lloyd_once(x, k, &mut rng);
        if best.as_ref().is_none_or(|(b, _)| wcss < *b) {
            best = Some((wcss, labels));
        }
    }
    let (_, labels) = best.unwrap();
    Partition::new(labels, k)
}

fn sq_dist(x: &DMatrix<f64>, i: usize, c: &[f64]) -> f64 {
    let d = x.ncols();
    let mut s = 0.0;
    for t in 0..d {
        let diff = x[(i, t)] - c[t];
        s += diff * diff;
    }
    s
}

fn lloyd_once(x: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = x.nrows();
    let d = x.ncols();

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    centers.push(x.row(first).iter().copied().collect());
    let mut dist2: Vec<f64> = (0..n).map(|i| sq_dist(x, i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centers.push(x.row(idx).iter().copied().collect());
        for i in 0..n {
            dist2[i] = dist2[i].min(sq_dist(x, i, centers.last().unwrap()));
        }
    }

    let mut labels = vec![0usize; n];
    for _ in 0..200 {
        // assignment
        let mut changed = false;
        for i in 0..n {
            let mut best_c = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let dd = sq_dist(x, i, center);
                if dd < best_d {
                    best_d = dd;
                    best_c = c;
                }
            }
            if labels[i] != best_c {
                labels[i] = best_c;
                changed = true;
            }
        }

        // update, reseeding empty clusters at the farthest point
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; d]; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for t in 0..d {
                sums[labels[i]][t] += x[(i, t)];
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(x, a, &centers[labels[a]]);
                        let db = sq_dist(x, b, &centers[labels[b]]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centers[c] = x.row(far).iter().copied().collect();
                labels[far] = c;
                changed = true;
            } else {
                for t in 0..d {
                    centers[c][t] = sums[c][t] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let wcss: f64 = (0..n).map(|i| sq_dist(x, i, &centers[labels[i]])).sum();
    (labels, wcss)
}

/// Unadjusted Rand index: the fraction of unordered pairs on which two
/// partitions agree (both together or both apart).
pub fn rand_index(a: &Partition, b: &Partition) -> Result<f64> {
    let n = a.len();
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            what: "partition length",
            expected: n,
            got: b.len(),
        });
    }
    if n < 2 {
        return Ok(1.0);
    }
    // contingency-table form: agreements = C(n,2) + 2*sum C(n_ij,2)
    //                                     - sum C(a_i,2) - sum C(b_j,2)
    let choose2 = |m: usize| (m * m.saturating_sub(1) / 2) as f64;
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut row = vec![0usize; a.k];
    let mut col = vec![0usize; b.k];
    for i in 0..n {
        *table.entry((a.labels[i], b.labels[i])).or_insert(0) += 1;
        row[a.labels[i]] += 1;
        col[b.labels[i]] += 1;
    }
    let s_cells: f64 = table.values().map(|&c| choose2(c)).sum();
    let s_row: f64 = row.iter().map(|&c| choose2(c)).sum();
    let s_col: f64 = col.iter().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    Ok((total + 2.0 * s_cells - s_row - s_col) / total)
}

/// Pearson correlation coefficient via single-pass co-moment accumulation.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "pcc vector length",
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::invalid("pcc needs at least 2 observations"));
    }
    let mut mean_a = 0.0;
    let mut mean_b = 0.0;
    let mut m2a = 0.0;
    let mut m2b = 0.0;
    let mut cab = 0.0;
    for (t, (&xa, &xb)) in a.iter().zip(b.iter()).enumerate() {
        let w = (t + 1) as f64;
        let da = xa - mean_a;
        mean_a += da / w;
        let db = xb - mean_b;
        mean_b += db / w;
        m2a += da * (xa - mean_a);
        m2b += db * (xb - mean_b);
        cab += da * (xb - mean_b);
    }
    if m2a <= 0.0 {
        return Err(Error::invalid("first input has zero variance"));
    }
    if m2b <= 0.0 {
        return Err(Error::invalid("second input has zero variance"));
    }
    Ok(cab / (m2a.sqrt() * m2b.sqrt()))
}

/// Flattens the strict upper triangle (`i < j`) of a square matrix, the
/// convention used when correlating probability matrices.
pub fn upper_triangle(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Centers each method's score by the unweighted cross-method mean, the
/// per-instance "Diff" variant reported in the study tables.
pub fn diff_metric(scores: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    if scores.is_empty() {
        return BTreeMap::new();
    }
    let mean: f64 = scores.values().sum::<f64>() / scores.len() as f64;
    scores
        .iter()
        .map(|(k, v)| (k.clone(), v - mean))
        .collect()
}
