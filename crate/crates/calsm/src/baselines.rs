//! Comparison methods for the simulation studies: truncated-SVD estimators
//! of the probability matrix (network-only, network plus covariates, and an
//! oracle-support variant) and a covariate-free latent space mode.

use nalgebra::DMatrix;

use crate::cavi::{fit_cavi, predict_probabilities, FitOptions};
use crate::error::{Error, Result};
use crate::model::{Covariates, FitReport, ModelConfig, Network};

/// Best rank-d factorization `u * diag(s) * v'` of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RankDApprox {
    /// `n x d` left singular vectors.
    pub u: DMatrix<f64>,
    /// Singular values, descending and nonnegative.
    pub s: Vec<f64>,
    /// `m x d` right singular vectors.
    pub v: DMatrix<f64>,
}

impl RankDApprox {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let d = self.s.len();
        let mut scaled = self.u.clone();
        for c in 0..d {
            scaled.column_mut(c).scale_mut(self.s[c]);
        }
        &scaled * self.v.transpose()
    }

    pub fn check(&self) -> Result<()> {
        for w in self.s.windows(2) {
            if w[1] > w[0] {
                return Err(Error::numerical("singular values not descending"));
            }
        }
        if self.s.iter().any(|&v| v < 0.0) {
            return Err(Error::numerical("negative singular value"));
        }
        for m in [&self.u, &self.v] {
            let gram = m.transpose() * m;
            let d = gram.nrows();
            for i in 0..d {
                for j in 0..d {
                    let target = if i == j { 1.0 } else { 0.0 };
                    if (gram[(i, j)] - target).abs() > 1e-8 {
                        return Err(Error::numerical("singular vectors not orthonormal"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rank-d truncation of an arbitrary dense matrix.
fn truncated_svd(m: &DMatrix<f64>, d: usize) -> Result<RankDApprox> {
    let svd = m.clone().svd(true, true);
    let u_full = svd.u.as_ref().expect("u requested");
    let vt_full = svd.v_t.as_ref().expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let d = d.min(order.len());
    let mut u = DMatrix::zeros(m.nrows(), d);
    let mut v = DMatrix::zeros(m.ncols(), d);
    let mut s = Vec::with_capacity(d);
    for (c, &idx) in order.iter().take(d).enumerate() {
        u.column_mut(c).copy_from(&u_full.column(idx));
        v.column_mut(c).copy_from(&vt_full.row(idx).transpose());
        s.push(svd.singular_values[idx]);
    }
    Ok(RankDApprox { u, s, v })
}

/// Best rank-d approximation of the adjacency matrix; the reconstruction is
/// the network-only probability estimate.
pub fn svd_y(net: &Network, d: usize) -> Result<(RankDApprox, DMatrix<f64>)> {
    if d > net.n() {
        return Err(Error::invalid(format!("d={d} exceeds n={}", net.n())));
    }
    let approx = truncated_svd(net.adjacency(), d)?;
    let rec = approx.reconstruct();
    Ok((approx, rec))
}

/// Rank-d approximation of the concatenation `[Y, Z~]`, where the covariates
/// are rescaled by their global max absolute entry; the leading `n x n`
/// block of the reconstruction is the probability estimate. Supplying an
/// oracle support restricts the covariates to those columns first.
pub fn svd_yz(
    net: &Network,
    cov: &Covariates,
    d: usize,
    oracle_support: Option<&[usize]>,
) -> Result<DMatrix<f64>> {
    let n = net.n();
    if d > n {
        return Err(Error::invalid(format!("d={d} exceeds n={n}")));
    }
    cov.check_n(n)?;

    let columns: Vec<usize> = match oracle_support {
        Some(support) => {
            for &c in support {
                if c >= cov.p() {
                    return Err(Error::invalid(format!(
                        "oracle support column {c} out of range (p={})",
                        cov.p()
                    )));
                }
            }
            support.to_vec()
        }
        None => (0..cov.p()).collect(),
    };
    if columns.is_empty() {
        log::warn!("svd_yz: empty covariate support, falling back to svd_y");
        return Ok(svd_y(net, d)?.1);
    }

    let mut sub = DMatrix::zeros(n, columns.len());
    for (c_out, &c_in) in columns.iter().enumerate() {
        sub.column_mut(c_out).copy_from(&cov.z().column(c_in));
    }
    let max_abs = sub.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if max_abs > 0.0 {
        sub /= max_abs;
    }

    let mut m = DMatrix::zeros(n, n + columns.len());
    m.view_mut((0, 0), (n, n)).copy_from(net.adjacency());
    m.view_mut((0, n), (n, columns.len())).copy_from(&sub);

    let approx = truncated_svd(&m, d)?;
    let rec = approx.reconstruct();
    Ok(rec.view((0, 0), (n, n)).into_owned())
}

/// Result of the covariate-free latent space fit.
#[derive(Debug, Clone)]
pub struct LsmFit {
    pub probabilities: DMatrix<f64>,
    pub latent_means: DMatrix<f64>,
    pub report: FitReport,
}

/// Latent space model without covariate information: the coordinate-ascent
/// engine run on an empty covariate block, so the position prior is centered
/// at zero with the same shrinkage scales.
pub fn lsm_mode(net: &Network, cfg: &ModelConfig, opts: &FitOptions, seed: u64) -> Result<LsmFit> {
    let cov = Covariates::empty(net.n());
    let (state, report) = fit_cavi(net, &cov, cfg, opts, seed)?;
    Ok(LsmFit {
        probabilities: predict_probabilities(&state),
        latent_means: state.x_mean_matrix(),
        report,
    })
}
