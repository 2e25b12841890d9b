//! Closed-form coordinate-ascent variational inference.
//!
//! The variational family is a fully factorized product: Gaussian blocks for
//! the intercept, each latent position, and each coefficient row;
//! Inverse-Gamma blocks for every squared scale and its auxiliary variable
//! (the half-Cauchy priors are expanded as Inverse-Gamma mixtures). The
//! Bernoulli likelihood is handled with the quadratic tangent bound, one
//! tangent parameter per node pair, which makes every coordinate update
//! conjugate and closed-form.
//!
//! Each update is the exact maximizer of the tangent-bound ELBO over its
//! factor, so the ELBO is non-decreasing after every individual step; the
//! test suite checks this both directly and through finite-difference
//! perturbation oracles.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{
    jj_coefficient, log_logistic, logistic, Covariates, FitReport, ModelConfig, Network,
};
use crate::special::{digamma, ln_gamma};

/// Gaussian variational factor with a full covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBlock {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianBlock {
    pub fn isotropic(d: usize, var: f64) -> Self {
        GaussianBlock {
            mean: DVector::zeros(d),
            covariance: DMatrix::identity(d, d) * var,
        }
    }

    /// `E[x' x] = tr(cov) + mean' mean`.
    pub fn second_moment_trace(&self) -> f64 {
        self.covariance.trace() + self.mean.norm_squared()
    }

    pub fn entropy(&self) -> Result<f64> {
        let d = self.mean.len() as f64;
        Ok(0.5 * d * (1.0 + (2.0 * std::f64::consts::PI).ln()) + 0.5 * self.log_det()?)
    }

    fn log_det(&self) -> Result<f64> {
        let chol = Cholesky::new(self.covariance.clone())
            .ok_or_else(|| Error::numerical("covariance is not positive definite"))?;
        Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
    }

    pub fn check(&self) -> Result<()> {
        let d = self.mean.len();
        if self.covariance.nrows() != d || self.covariance.ncols() != d {
            return Err(Error::DimensionMismatch {
                what: "covariance size",
                expected: d,
                got: self.covariance.nrows(),
            });
        }
        for i in 0..d {
            for j in (i + 1)..d {
                if (self.covariance[(i, j)] - self.covariance[(j, i)]).abs() > 1e-10 {
                    return Err(Error::numerical("covariance is not symmetric"));
                }
            }
        }
        if Cholesky::new(self.covariance.clone()).is_none() {
            return Err(Error::numerical("covariance is not positive definite"));
        }
        Ok(())
    }
}

/// Inverse-Gamma factor IG(shape, rate), density `~ x^(-shape-1) e^(-rate/x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGammaBlock {
    pub shape: f64,
    pub rate: f64,
}

impl InverseGammaBlock {
    pub fn new(shape: f64, rate: f64) -> Self {
        InverseGammaBlock { shape, rate }
    }

    /// `E[1/x] = shape / rate`.
    pub fn mean_inv(&self) -> f64 {
        self.shape / self.rate
    }

    /// `E[log x] = log(rate) - digamma(shape)`.
    pub fn e_log(&self) -> f64 {
        self.rate.ln() - digamma(self.shape)
    }

    pub fn entropy(&self) -> f64 {
        self.shape + self.rate.ln() + ln_gamma(self.shape)
            - (1.0 + self.shape) * digamma(self.shape)
    }

    pub fn check(&self) -> Result<()> {
        if self.shape > 0.0 && self.rate > 0.0 {
            Ok(())
        } else {
            Err(Error::numerical(format!(
                "inverse-gamma parameters must be positive: shape={}, rate={}",
                self.shape, self.rate
            )))
        }
    }
}

/// Full CAVI state: every variational factor plus the tangent parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CaviState {
    pub beta_mean: f64,
    pub beta_var: f64,
    pub x_blocks: Vec<GaussianBlock>,
    pub b_blocks: Vec<GaussianBlock>,
    /// Squared local scales of the node residuals.
    pub lambda_x: Vec<InverseGammaBlock>,
    pub v_x_local: Vec<InverseGammaBlock>,
    /// Squared global scale of the node residuals.
    pub tau_x: InverseGammaBlock,
    pub v_x_global: InverseGammaBlock,
    /// Squared local scales of the coefficient rows.
    pub lambda_b: Vec<InverseGammaBlock>,
    pub v_b_local: Vec<InverseGammaBlock>,
    pub tau_b: InverseGammaBlock,
    pub v_b_global: InverseGammaBlock,
    /// Symmetric nonnegative tangent parameters, one per node pair.
    pub xi: DMatrix<f64>,
    pub cycle_count: usize,
    pub elbo_trace: Vec<f64>,
}

impl CaviState {
    pub fn n(&self) -> usize {
        self.x_blocks.len()
    }

    pub fn p(&self) -> usize {
        self.b_blocks.len()
    }

    /// Stacks the coefficient means into the `p x d` matrix used by the
    /// regression-style updates.
    pub fn b_mean_matrix(&self) -> DMatrix<f64> {
        let p = self.p();
        let d = if p > 0 { self.b_blocks[0].mean.len() } else { 0 };
        let mut m = DMatrix::zeros(p, d);
        for (k, blk) in self.b_blocks.iter().enumerate() {
            m.row_mut(k).copy_from(&blk.mean.transpose());
        }
        m
    }

    /// Stacks the latent means into an `n x d` matrix.
    pub fn x_mean_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        let d = self.x_blocks[0].mean.len();
        let mut m = DMatrix::zeros(n, d);
        for (i, blk) in self.x_blocks.iter().enumerate() {
            m.row_mut(i).copy_from(&blk.mean.transpose());
        }
        m
    }

    pub fn check_invariants(&self) -> Result<()> {
        for blk in self.x_blocks.iter().chain(self.b_blocks.iter()) {
            blk.check()?;
        }
        for ig in self
            .lambda_x
            .iter()
            .chain(self.v_x_local.iter())
            .chain(self.lambda_b.iter())
            .chain(self.v_b_local.iter())
            .chain([&self.tau_x, &self.v_x_global, &self.tau_b, &self.v_b_global])
        {
            ig.check()?;
        }
        if !(self.beta_var > 0.0) {
            return Err(Error::numerical("intercept variance must be positive"));
        }
        let n = self.n();
        for i in 0..n {
            for j in (i + 1)..n {
                if self.xi[(i, j)] < 0.0 || (self.xi[(i, j)] - self.xi[(j, i)]).abs() > 1e-12 {
                    return Err(Error::numerical("tangent parameters must be symmetric >= 0"));
                }
            }
        }
        Ok(())
    }
}

/// Stopping controls for [`fit_cavi`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_cycles: usize,
    /// Mean absolute change in fitted probabilities between cycles.
    pub prob_tolerance: f64,
    pub track_elbo: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_cycles: 200,
            prob_tolerance: 1e-4,
            track_elbo: true,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_cycles < 1 {
            return Err(Error::invalid("max_cycles must be >= 1"));
        }
        if !(self.prob_tolerance > 0.0) {
            return Err(Error::invalid("prob_tolerance must be positive"));
        }
        Ok(())
    }
}

/// Spectral embedding of the density-centered adjacency: top-d eigenpairs by
/// absolute eigenvalue, columns scaled by sqrt|eigenvalue|, then the whole
/// embedding rescaled so the largest row norm is 1.
fn spectral_embedding(net: &Network, d: usize) -> DMatrix<f64> {
    let n = net.n();
    let pairs = net.pair_count() as f64;
    let density = if pairs > 0.0 {
        net.positive_edges().len() as f64 / pairs
    } else {
        0.0
    };
    let mut centered = net.adjacency().clone();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                centered[(i, j)] -= density;
            } else {
                centered[(i, j)] = 0.0;
            }
        }
    }
    let eig = SymmetricEigen::new(centered);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .partial_cmp(&eig.eigenvalues[a].abs())
            .unwrap()
    });

    let mut x0 = DMatrix::zeros(n, d);
    for (col, &idx) in order.iter().take(d).enumerate() {
        let scale = eig.eigenvalues[idx].abs().sqrt();
        let mut v: DVector<f64> = eig.eigenvectors.column(idx).into();
        // deterministic sign: largest-magnitude entry positive
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[lead] < 0.0 {
            v = -v;
        }
        for i in 0..n {
            x0[(i, col)] = v[i] * scale;
        }
    }
    let max_row_norm = (0..n).map(|i| x0.row(i).norm()).fold(0.0_f64, f64::max);
    if max_row_norm > 0.0 {
        x0 /= max_row_norm;
    }
    x0
}

/// Initializes the variational state: spectral means for the positions, zero
/// coefficient means, 0.1-identity covariances, unit-ratio Inverse-Gamma
/// blocks, the configured intercept prior, and one tangent pass.
pub fn init_state(
    net: &Network,
    cov: &Covariates,
    cfg: &ModelConfig,
    _seed: u64,
) -> Result<CaviState> {
    cfg.validate()?;
    cov.check_n(net.n())?;
    let n = net.n();
    let d = cfg.d;
    if n < d + 1 {
        return Err(Error::invalid(format!(
            "need at least d+1 = {} nodes, got {n}",
            d + 1
        )));
    }
    let p = cov.p();

    let x0 = spectral_embedding(net, d);
    let x_blocks: Vec<GaussianBlock> = (0..n)
        .map(|i| GaussianBlock {
            mean: x0.row(i).transpose(),
            covariance: DMatrix::identity(d, d) * 0.1,
        })
        .collect();
    let b_blocks: Vec<GaussianBlock> = (0..p).map(|_| GaussianBlock::isotropic(d, 0.1)).collect();

    let unit = InverseGammaBlock::new(1.0, 1.0);
    let mut state = CaviState {
        beta_mean: 0.0,
        beta_var: cfg.beta_prior_var,
        x_blocks,
        b_blocks,
        lambda_x: vec![unit; n],
        v_x_local: vec![unit; n],
        tau_x: unit,
        v_x_global: unit,
        lambda_b: vec![unit; p],
        v_b_local: vec![unit; p],
        tau_b: unit,
        v_b_global: unit,
        xi: DMatrix::zeros(n, n),
        cycle_count: 0,
        elbo_trace: Vec::new(),
    };
    update_xi(&mut state)?;
    Ok(state)
}

/// Second moment of the pair predictor under the variational law:
/// `(m, s) = (E[eta_ij], E[eta_ij^2])`.
fn eta_moments(state: &CaviState, i: usize, j: usize) -> (f64, f64) {
    let bi = &state.x_blocks[i];
    let bj = &state.x_blocks[j];
    let dot = bi.mean.dot(&bj.mean);
    let m = state.beta_mean + dot;
    let tr_cross = (&bi.covariance * &bj.covariance).trace();
    let qi = (&bj.covariance * &bi.mean).dot(&bi.mean);
    let qj = (&bi.covariance * &bj.mean).dot(&bj.mean);
    let s = tr_cross
        + qi
        + qj
        + dot * dot
        + 2.0 * state.beta_mean * dot
        + state.beta_mean * state.beta_mean
        + state.beta_var;
    (m, s)
}

/// Tangent update: `xi_ij = sqrt(E[eta_ij^2])` for every pair.
pub fn update_xi(state: &mut CaviState) -> Result<()> {
    let n = state.n();
    for i in 0..n {
        for j in (i + 1)..n {
            let (_, s) = eta_moments(state, i, j);
            if s < -1e-10 {
                return Err(Error::numerical(format!(
                    "expected squared predictor is negative at pair ({i},{j}): {s}"
                )));
            }
            let xi = s.max(0.0).sqrt();
            state.xi[(i, j)] = xi;
            state.xi[(j, i)] = xi;
        }
    }
    Ok(())
}

/// Intercept update under the tangent bound.
pub fn update_beta(state: &mut CaviState, net: &Network, cfg: &ModelConfig) -> Result<()> {
    let n = state.n();
    let mut sum_a = 0.0;
    let mut sum_lin = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let a = jj_coefficient(state.xi[(i, j)])?;
            let dot = state.x_blocks[i].mean.dot(&state.x_blocks[j].mean);
            sum_a += a;
            sum_lin += net.edge(i, j) - 0.5 - 2.0 * a * dot;
        }
    }
    let prior_prec = 1.0 / cfg.beta_prior_var;
    state.beta_var = 1.0 / (prior_prec + 2.0 * cfg.alpha * sum_a);
    state.beta_mean =
        state.beta_var * (cfg.alpha * sum_lin + cfg.beta_prior_mean * prior_prec);
    Ok(())
}

/// Recomputes one latent-position block as the exact conditional maximizer,
/// reading the freshest values of every other block.
pub fn update_x_node(
    state: &mut CaviState,
    i: usize,
    net: &Network,
    cov: &Covariates,
    cfg: &ModelConfig,
) -> Result<()> {
    let n = state.n();
    let d = cfg.d;
    let w_i = state.lambda_x[i].mean_inv() * state.tau_x.mean_inv();

    let mut prec = DMatrix::identity(d, d) * w_i;
    let mut lin = DVector::zeros(d);
    for j in 0..n {
        if j == i {
            continue;
        }
        let a = jj_coefficient(state.xi[(i, j)])?;
        let bj = &state.x_blocks[j];
        // alpha-scaled likelihood terms
        prec += cfg.alpha
            * 2.0
            * a
            * (&bj.covariance + &bj.mean * bj.mean.transpose());
        lin += cfg.alpha
            * (net.edge(i, j) - 0.5 - 2.0 * a * state.beta_mean)
            * &bj.mean;
    }
    if cov.p() > 0 {
        let zi = cov.row(i);
        let prior_mean = state.b_mean_matrix().transpose() * zi;
        lin += w_i * prior_mean;
    }

    let chol = Cholesky::new(prec.clone()).ok_or_else(|| {
        Error::numerical(format!("latent precision for node {i} is not positive definite"))
    })?;
    let mut covariance = chol.inverse();
    // kill asymmetry drift from the solve
    covariance = (&covariance + covariance.transpose()) * 0.5;
    let mean = chol.solve(&lin);
    state.x_blocks[i] = GaussianBlock { mean, covariance };
    Ok(())
}

/// Sequential sweep over all latent-position blocks in index order.
pub fn update_x(
    state: &mut CaviState,
    net: &Network,
    cov: &Covariates,
    cfg: &ModelConfig,
) -> Result<()> {
    for i in 0..state.n() {
        update_x_node(state, i, net, cov, cfg)?;
    }
    Ok(())
}

/// Expected squared residuals `R_i = E || x_i - B' z_i ||^2` for all nodes.
fn expected_residuals(state: &CaviState, cov: &Covariates) -> Result<Vec<f64>> {
    let n = state.n();
    let p = state.p();
    let b_mean = state.b_mean_matrix();
    let tr_b: Vec<f64> = state.b_blocks.iter().map(|b| b.covariance.trace()).collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let xb = &state.x_blocks[i];
        let mut r = xb.second_moment_trace();
        if p > 0 {
            let zi = cov.row(i);
            let m_i = b_mean.transpose() * &zi; // E[B' z_i]
            let z_sq_tr: f64 = (0..p).map(|k| zi[k] * zi[k] * tr_b[k]).sum();
            r += z_sq_tr + m_i.norm_squared() - 2.0 * m_i.dot(&xb.mean);
        }
        if r < -1e-10 {
            return Err(Error::numerical(format!(
                "expected squared residual for node {i} is negative: {r}"
            )));
        }
        out.push(r.max(0.0));
    }
    Ok(out)
}

/// Node-side scale updates: local and global squared scales with their
/// auxiliary variables, each conditionally conjugate.
pub fn update_scales_x(state: &mut CaviState, cov: &Covariates, cfg: &ModelConfig) -> Result<()> {
    let n = state.n();
    let d = cfg.d as f64;
    let residuals = expected_residuals(state, cov)?;

    let tau_ratio = state.tau_x.mean_inv();
    for i in 0..n {
        state.lambda_x[i] = InverseGammaBlock::new(
            (d + 1.0) / 2.0,
            0.5 * tau_ratio * residuals[i] + state.v_x_local[i].mean_inv(),
        );
        state.v_x_local[i] = InverseGammaBlock::new(1.0, 1.0 + state.lambda_x[i].mean_inv());
    }

    let rate: f64 = (0..n)
        .map(|i| 0.5 * state.lambda_x[i].mean_inv() * residuals[i])
        .sum::<f64>()
        + state.v_x_global.mean_inv();
    state.tau_x = InverseGammaBlock::new((n as f64 * d + 1.0) / 2.0, rate);
    state.v_x_global = InverseGammaBlock::new(1.0, 1.0 + state.tau_x.mean_inv());
    Ok(())
}

/// Recomputes one coefficient block. The residual direction is
/// `mu_x_i - sum_{l != k} z_il mu_b_l`: the sign that makes the update the
/// ELBO maximizer (adjudicated by the perturbation tests).
pub fn update_b_coeff(
    state: &mut CaviState,
    k: usize,
    cov: &Covariates,
    cfg: &ModelConfig,
    node_weights: &[f64],
    partial: &mut DMatrix<f64>,
) -> Result<()> {
    let n = state.n();
    let d = cfg.d;
    let z = cov.z();
    let u_k = state.lambda_b[k].mean_inv() * state.tau_b.mean_inv();

    let old_mean = state.b_blocks[k].mean.clone();
    let mut prec = u_k;
    let mut lin = DVector::zeros(d);
    for i in 0..n {
        let zik = z[(i, k)];
        if zik == 0.0 {
            continue;
        }
        prec += node_weights[i] * zik * zik;
        // residual excludes coefficient k: partial_i - z_ik * old b_k
        let mut resid = state.x_blocks[i].mean.clone();
        for t in 0..d {
            resid[t] -= partial[(i, t)] - zik * old_mean[t];
        }
        lin.axpy(node_weights[i] * zik, &resid, 1.0);
    }

    let mean = lin / prec;
    for i in 0..n {
        let zik = z[(i, k)];
        if zik == 0.0 {
            continue;
        }
        for t in 0..d {
            partial[(i, t)] += zik * (mean[t] - old_mean[t]);
        }
    }
    state.b_blocks[k] = GaussianBlock {
        mean,
        covariance: DMatrix::identity(d, d) / prec,
    };
    Ok(())
}

/// Sequential sweep over all coefficient blocks in index order.
pub fn update_b(state: &mut CaviState, cov: &Covariates, cfg: &ModelConfig) -> Result<()> {
    let p = state.p();
    if p == 0 {
        return Ok(());
    }
    let node_weights: Vec<f64> = (0..state.n())
        .map(|i| state.lambda_x[i].mean_inv() * state.tau_x.mean_inv())
        .collect();
    // running sum_l z_il mu_b_l, refreshed as each coefficient moves
    let mut partial = cov.z() * state.b_mean_matrix();
    for k in 0..p {
        update_b_coeff(state, k, cov, cfg, &node_weights, &mut partial)?;
    }
    Ok(())
}

/// Coefficient-side scale updates, mirroring the node side with the
/// coefficient second moments in place of the residuals.
pub fn update_scales_b(state: &mut CaviState, cfg: &ModelConfig) -> Result<()> {
    let p = state.p();
    let d = cfg.d as f64;
    let moments: Vec<f64> = state.b_blocks.iter().map(|b| b.second_moment_trace()).collect();

    let tau_ratio = state.tau_b.mean_inv();
    for k in 0..p {
        state.lambda_b[k] = InverseGammaBlock::new(
            (d + 1.0) / 2.0,
            0.5 * tau_ratio * moments[k] + state.v_b_local[k].mean_inv(),
        );
        state.v_b_local[k] = InverseGammaBlock::new(1.0, 1.0 + state.lambda_b[k].mean_inv());
    }

    let rate: f64 = (0..p)
        .map(|k| 0.5 * state.lambda_b[k].mean_inv() * moments[k])
        .sum::<f64>()
        + state.v_b_global.mean_inv();
    state.tau_b = InverseGammaBlock::new((p as f64 * d + 1.0) / 2.0, rate);
    state.v_b_global = InverseGammaBlock::new(1.0, 1.0 + state.tau_b.mean_inv());
    Ok(())
}

/// Log of the Inverse-Gamma mixture layer in the ELBO: `E[log p(s | v)]`
/// where `s | v ~ IG(1/2, 1/v)`, plus `E[log p(v)]` with `v ~ IG(1/2, 1)`.
fn ig_mixture_terms(scale: &InverseGammaBlock, aux: &InverseGammaBlock) -> f64 {
    let ln_gamma_half = ln_gamma(0.5);
    let scale_given_aux = -0.5 * aux.e_log()
        - ln_gamma_half
        - 1.5 * scale.e_log()
        - aux.mean_inv() * scale.mean_inv();
    let aux_prior = -ln_gamma_half - 1.5 * aux.e_log() - aux.mean_inv();
    scale_given_aux + aux_prior
}

/// Evidence lower bound of the tangent-transformed fractional model at the
/// current state: every expectation is closed-form.
pub fn compute_elbo(
    state: &CaviState,
    net: &Network,
    cov: &Covariates,
    cfg: &ModelConfig,
) -> Result<f64> {
    let n = state.n();
    let p = state.p();
    let d = cfg.d as f64;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();

    // tangent-bounded likelihood
    let mut lik = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let xi = state.xi[(i, j)];
            let a = jj_coefficient(xi)?;
            let (m, s) = eta_moments(state, i, j);
            lik += (net.edge(i, j) - 0.5) * m - a * s + log_logistic(xi) - 0.5 * xi
                + a * xi * xi;
        }
    }
    let mut elbo = cfg.alpha * lik;

    // intercept prior and entropy
    elbo += -0.5 * (ln_2pi + cfg.beta_prior_var.ln())
        - (state.beta_var + (state.beta_mean - cfg.beta_prior_mean).powi(2))
            / (2.0 * cfg.beta_prior_var);
    elbo += 0.5 * (1.0 + ln_2pi) + 0.5 * state.beta_var.ln();

    // latent positions: prior, mixture layers, entropies
    let residuals = expected_residuals(state, cov)?;
    let tau_x_ratio = state.tau_x.mean_inv();
    let e_log_tau_x = state.tau_x.e_log();
    for i in 0..n {
        elbo += -0.5 * d * ln_2pi
            - 0.5 * d * (state.lambda_x[i].e_log() + e_log_tau_x)
            - 0.5 * state.lambda_x[i].mean_inv() * tau_x_ratio * residuals[i];
        elbo += ig_mixture_terms(&state.lambda_x[i], &state.v_x_local[i]);
        elbo += state.x_blocks[i].entropy()?;
        elbo += state.lambda_x[i].entropy() + state.v_x_local[i].entropy();
    }
    elbo += ig_mixture_terms(&state.tau_x, &state.v_x_global);
    elbo += state.tau_x.entropy() + state.v_x_global.entropy();

    // coefficients: prior, mixture layers, entropies
    let tau_b_ratio = state.tau_b.mean_inv();
    let e_log_tau_b = state.tau_b.e_log();
    for k in 0..p {
        let moment = state.b_blocks[k].second_moment_trace();
        elbo += -0.5 * d * ln_2pi
            - 0.5 * d * (state.lambda_b[k].e_log() + e_log_tau_b)
            - 0.5 * state.lambda_b[k].mean_inv() * tau_b_ratio * moment;
        elbo += ig_mixture_terms(&state.lambda_b[k], &state.v_b_local[k]);
        elbo += state.b_blocks[k].entropy()?;
        elbo += state.lambda_b[k].entropy() + state.v_b_local[k].entropy();
    }
    elbo += ig_mixture_terms(&state.tau_b, &state.v_b_global);
    elbo += state.tau_b.entropy() + state.v_b_global.entropy();

    Ok(elbo)
}

/// Plug-in posterior-mean link probabilities
/// `logistic(beta_mean + mu_i' mu_j)`. The diagonal is filled by the same
/// formula but does not correspond to observed data (self-loops are not
/// modeled).
pub fn predict_probabilities(state: &CaviState) -> DMatrix<f64> {
    let n = state.n();
    let mut probs = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = logistic(state.beta_mean + state.x_blocks[i].mean.dot(&state.x_blocks[j].mean));
            probs[(i, j)] = v;
            probs[(j, i)] = v;
        }
    }
    probs
}

fn mean_abs_diff_upper(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let pairs = n * (n - 1) / 2;
    if pairs == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            acc += (a[(i, j)] - b[(i, j)]).abs();
        }
    }
    acc / pairs as f64
}

/// Runs full CAVI cycles (tangent, intercept, positions, node scales,
/// coefficients, coefficient scales) until the probability field stabilizes
/// or the cycle cap is reached.
pub fn fit_cavi(
    net: &Network,
    cov: &Covariates,
    cfg: &ModelConfig,
    opts: &FitOptions,
    seed: u64,
) -> Result<(CaviState, FitReport)> {
    opts.validate()?;
    let start = Instant::now();
    let mut state = init_state(net, cov, cfg, seed)?;
    let mut prev = predict_probabilities(&state);
    let mut converged = false;

    while state.cycle_count < opts.max_cycles {
        run_cycle(&mut state, net, cov, cfg)?;
        if opts.track_elbo {
            let elbo = compute_elbo(&state, net, cov, cfg)?;
            state.elbo_trace.push(elbo);
        }
        let probs = predict_probabilities(&state);
        let delta = mean_abs_diff_upper(&prev, &probs);
        prev = probs;
        if delta < opts.prob_tolerance {
            converged = true;
            break;
        }
    }

    let final_elbo = match state.elbo_trace.last() {
        Some(&e) => Some(e),
        None => Some(compute_elbo(&state, net, cov, cfg)?),
    };
    let report = FitReport {
        cycles: state.cycle_count,
        steps: 0,
        final_elbo,
        best_smoothed_elbo: None,
        converged,
        final_learning_rate: None,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((state, report))
}

/// One full cycle in the fixed step order.
pub fn run_cycle(
    state: &mut CaviState,
    net: &Network,
    cov: &Covariates,
    cfg: &ModelConfig,
) -> Result<()> {
    update_xi(state)?;
    update_beta(state, net, cfg)?;
    update_x(state, net, cov, cfg)?;
    update_scales_x(state, cov, cfg)?;
    update_b(state, cov, cfg)?;
    update_scales_b(state, cfg)?;
    state.cycle_count += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_instance(n: usize, p: usize, seed: u64) -> (Network, Covariates) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(0.3) {
                    edges.push((i, j));
                }
            }
        }
        let net = Network::from_edges(n, &edges).unwrap();
        let z = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        (net, Covariates::new(z))
    }

    #[test]
    fn init_state_satisfies_invariants_and_is_deterministic() {
        let (net, cov) = toy_instance(8, 3, 2);
        let cfg = ModelConfig::new(2, 8);
        let a = init_state(&net, &cov, &cfg, 5).unwrap();
        a.check_invariants().unwrap();
        let b = init_state(&net, &cov, &cfg, 5).unwrap();
        assert_eq!(a, b);
        assert!(init_state(&net, &cov, &ModelConfig::new(8, 8), 5).is_err());
    }

    #[test]
    fn init_state_empty_graph_zero_means() {
        let net = Network::from_edges(5, &[]).unwrap();
        let cov = Covariates::empty(5);
        let cfg = ModelConfig::new(2, 5);
        let state = init_state(&net, &cov, &cfg, 1).unwrap();
        assert_eq!(state.beta_mean, 0.0);
        for blk in &state.x_blocks {
            assert!(blk.mean.iter().all(|&v| v == 0.0));
        }
        assert!(state.b_blocks.is_empty());
    }

    #[test]
    fn update_xi_unit_state_value() {
        let (net, cov) = toy_instance(4, 2, 3);
        let d = 2;
        let cfg = ModelConfig::new(d, 4);
        let mut state = init_state(&net, &cov, &cfg, 0).unwrap();
        for blk in state.x_blocks.iter_mut() {
            blk.mean.fill(0.0);
            blk.covariance = DMatrix::identity(d, d);
        }
        state.beta_mean = 0.0;
        state.beta_var = 1.0;
        update_xi(&mut state).unwrap();
        // tr(I I) = d, plus beta second moment 1
        let expected = ((d as f64) + 1.0).sqrt();
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert_relative_eq!(state.xi[(i, j)], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn update_xi_point_mass_collapses_to_abs_eta() {
        let (net, cov) = toy_instance(3, 2, 4);
        let cfg = ModelConfig::new(2, 3);
        let mut state = init_state(&net, &cov, &cfg, 0).unwrap();
        let means = [
            DVector::from_vec(vec![0.5, -1.0]),
            DVector::from_vec(vec![1.5, 0.25]),
            DVector::from_vec(vec![-0.75, 2.0]),
        ];
        for (blk, m) in state.x_blocks.iter_mut().zip(means.iter()) {
            blk.mean = m.clone();
            blk.covariance = DMatrix::identity(2, 2) * 1e-18;
        }
        state.beta_mean = -0.4;
        state.beta_var = 1e-18;
        update_xi(&mut state).unwrap();
        for i in 0..3 {
            for j in (i + 1)..3 {
                let eta = -0.4 + means[i].dot(&means[j]);
                assert_relative_eq!(state.xi[(i, j)], eta.abs(), max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn update_beta_hand_values() {
        // two nodes, one edge, zero latent means, xi = 0 so A = 1/8
        let net = Network::from_edges(2, &[(0, 1)]).unwrap();
        let cov = Covariates::empty(2);
        let mut cfg = ModelConfig::new(1, 2);
        cfg.beta_prior_mean = 0.0;
        cfg.beta_prior_var = 1.0;
        let mut state = init_state(&net, &cov, &cfg, 0).unwrap();
        for blk in state.x_blocks.iter_mut() {
            blk.mean.fill(0.0);
        }
        state.xi.fill(0.0);
        update_beta(&mut state, &net, &cfg).unwrap();
        assert_relative_eq!(state.beta_var, 0.8, epsilon = 1e-12);
        assert_relative_eq!(state.beta_mean, 0.4, epsilon = 1e-12);

        // empty two-node graph flips the data term
        let net0 = Network::from_edges(2, &[]).unwrap();
        let mut state0 = init_state(&net0, &cov, &cfg, 0).unwrap();
        for blk in state0.x_blocks.iter_mut() {
            blk.mean.fill(0.0);
        }
        state0.xi.fill(0.0);
        update_beta(&mut state0, &net0, &cfg).unwrap();
        assert_relative_eq!(state0.beta_mean, -0.4, epsilon = 1e-12);

        // flat-prior limit: mean = sum(y - 1/2) / (2 sum A)
        cfg.beta_prior_var = 1e14;
        let mut flat = init_state(&net, &cov, &cfg, 0).unwrap();
        for blk in flat.x_blocks.iter_mut() {
            blk.mean.fill(0.0);
        }
        flat.xi.fill(0.0);
        update_beta(&mut flat, &net, &cfg).unwrap();
        assert_relative_eq!(flat.beta_mean, 0.5 / 0.25, epsilon = 1e-6);
    }

    #[test]
    fn update_x_prior_mean_fallback() {
        // neighbors pinned at zero with negligible covariance: the update
        // collapses to the prior mean B' z_i
        let (net, cov) = toy_instance(4, 2, 8);
        let cfg = ModelConfig::new(2, 4);
        let mut state = init_state(&net, &cov, &cfg, 0).unwrap();
        for blk in state.x_blocks.iter_mut() {
            blk.mean.fill(0.0);
            blk.covariance = DMatrix::identity(2, 2) * 1e-300;
        }
        state.b_blocks[0].mean = DVector::from_vec(vec![0.8, -0.3]);
        state.b_blocks[1].mean = DVector::from_vec(vec![-0.2, 1.1]);
        state.beta_mean = -1.0;
        update_xi(&mut state).unwrap();
        update_x_node(&mut state, 0, &net, &cov, &cfg).unwrap();
        let prior_mean = state.b_mean_matrix().transpose() * cov.row(0);
        for t in 0..2 {
            assert_relative_eq!(state.x_blocks[0].mean[t], prior_mean[t], epsilon = 1e-12);
        }
    }

    #[test]
    fn update_x_two_node_scalar_formula() {
        let net = Network::from_edges(2, &[(0, 1)]).unwrap();
        let z = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let cov = Covariates::new(z);
        let cfg = ModelConfig::new(1, 2);
        let mut state = init_state(&net, &cov, &cfg, 0).unwrap();

        let (m2, s2, w1, mu_beta, b_mean, xi) = (0.7, 0.3, 2.0, -0.5, 1.2, 1.0);
        state.x_blocks[1].mean = DVector::from_element(1, m2);
        state.x_blocks[1].covariance = DMatrix::from_element(1, 1, s2);
        state.b_blocks[0].mean = DVector::from_element(1, b_mean);
        state.beta_mean = mu_beta;
        state.lambda_x[0] = InverseGammaBlock::new(2.0, 1.0); // ratio 2
        state.tau_x = InverseGammaBlock::new(1.0, 1.0); // ratio 1 -> w1 = 2
        state.xi.fill(xi);

        update_x_node(&mut state, 0, &net, &cov, &cfg).unwrap();

        let a = jj_coefficient(xi).unwrap();
        let prec = 2.0 * a * (s2 + m2 * m2) + w1;
        let lin = (1.0 - 0.5 - 2.0 * a * mu_beta) * m2 + w1 * b_mean * 1.0;
        assert_relative_eq!(state.x_blocks[0].covariance[(0, 0)], 1.0 / prec, epsilon = 1e-12);
        assert_relative_eq!(state.x_blocks[0].mean[0], lin / prec, epsilon = 1e-12);
    }

    #[test]
    fn scales_x_zero_residual_case() {
        // point mass at x_i = B' z_i: rate reduces to the auxiliary ratio
        let net = Network::from_edges(3, &[(0, 1)]).unwrap();
        let z = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, -1.0]);
        let cov = Covariates::new(z);
        let cfg = ModelConfig::new(1, 3);
        let mut state = init_state(&net, &cov, &cfg, 0).unwrap();
        let b_val = 0.6;
        state.b_blocks[0].mean = DVector::from_element(1, b_val);
        state.b_blocks[0].covariance = DMatrix::from_element(1, 1, 1e-300);
        for i in 0..3 {
            state.x_blocks[i].mean = DVector::from_element(1, b_val * cov.z()[(i, 0)]);
            state.x_blocks[i].covariance = DMatrix::from_element(1, 1, 1e-300);
        }
        update_scales_x(&mut state, &cov, &cfg).unwrap();
        for i in 0..3 {
            assert_relative_eq!(
                state.lambda_x[i].rate,
                state.v_x_local[i].rate / (1.0 + state.lambda_x[i].mean_inv()),
                max_relative = 1e-9
            );
            // rate == aux ratio used in the update (aux was unit at update time)
            assert_relative_eq!(state.lambda_x[i].rate, 1.0, max_relative = 1e-9);
        }
    }

    #[test]
    fn scales_x_scalar_hand_instance() {
        // n=1, p=1, d=1: every quantity reduces to explicit arithmetic
        let net = Network::from_edges(1, &[]).unwrap();
        let z = DMatrix::from_row_slice(1, 1, &[1.5]);
        let cov = Covariates::new(z);
        let cfg = ModelConfig::new(1, 1);
        // init_state requires n >= d+1, so assemble the state by hand
        let mut state = CaviState {
            beta_mean: 0.0,
            beta_var: 1.0,
            x_blocks: vec![GaussianBlock {
                mean: DVector::from_element(1, 0.4),
                covariance: DMatrix::from_element(1, 1, 0.2),
            }],
            b_blocks: vec![GaussianBlock {
                mean: DVector::from_element(1, -0.3),
                covariance: DMatrix::from_element(1, 1, 0.1),
            }],
            lambda_x: vec![InverseGammaBlock::new(2.0, 4.0)],
            v_x_local: vec![InverseGammaBlock::new(1.0, 2.0)],
            tau_x: InverseGammaBlock::new(3.0, 6.0),
            v_x_global: InverseGammaBlock::new(1.0, 4.0),
            lambda_b: vec![InverseGammaBlock::new(1.0, 1.0)],
            v_b_local: vec![InverseGammaBlock::new(1.0, 1.0)],
            tau_b: InverseGammaBlock::new(1.0, 1.0),
            v_b_global: InverseGammaBlock::new(1.0, 1.0),
            xi: DMatrix::zeros(1, 1),
            cycle_count: 0,
            elbo_trace: vec![],
        };

        // R = s_x + mu_x^2 + z^2 (tr S_b + mu_b^2) - 2 z mu_b mu_x
        let r = 0.2 + 0.16 + 2.25 * (0.1 + 0.09) - 2.0 * 1.5 * (-0.3) * 0.4;
        update_scales_x(&mut state, &cov, &cfg).unwrap();

        let tau_ratio_at_update = 0.5; // 3/6
        assert_relative_eq!(state.lambda_x[0].shape, 1.0, epsilon = 1e-15);
        assert_relative_eq!(
            state.lambda_x[0].rate,
            0.5 * tau_ratio_at_update * r + 0.5,
            epsilon = 1e-12
        );
        assert_relative_eq!(state.v_x_local[0].shape, 1.0, epsilon = 1e-15);
        assert_relative_eq!(
            state.v_x_local[0].rate,
            1.0 + state.lambda_x[0].mean_inv(),
            epsilon = 1e-12
        );
        assert_relative_eq!(state.tau_x.shape, 1.0, epsilon = 1e-15);
        assert_relative_eq!(
            state.tau_x.rate,
            0.5 * state.lambda_x[0].mean_inv() * r + 0.25,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            state.v_x_global.rate,
            1.0 + state.tau_x.mean_inv(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn update_b_zero_column_and_ridge_scalar() {
        // column of zeros: coefficient collapses to its prior
        let net = Network::from_edges(3, &[(0, 1)]).unwrap();
        let z = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 0.0, -1.0, 0.0, 0.5]);
        let cov = Covariates::new(z);
        let cfg = ModelConfig::new(2, 3);
        let mut state = init_state(&net, &cov, &cfg, 0).unwrap();
        state.b_blocks[0].mean = DVector::from_vec(vec![0.7, -0.2]);
        update_b(&mut state, &cov, &cfg).unwrap();
        assert!(state.b_blocks[0].mean.iter().all(|&v| v == 0.0));
        let u0 = state.lambda_b[0].mean_inv() * state.tau_b.mean_inv();
        assert_relative_eq!(state.b_blocks[0].covariance[(0, 0)], 1.0 / u0, epsilon = 1e-12);

        // scalar ridge-regression form with one node, one coefficient
        let z1 = DMatrix::from_row_slice(1, 1, &[1.5]);
        let cov1 = Covariates::new(z1);
        let cfg1 = ModelConfig::new(1, 1);
        let mut s1 = CaviState {
            beta_mean: 0.0,
            beta_var: 1.0,
            x_blocks: vec![GaussianBlock {
                mean: DVector::from_element(1, 0.9),
                covariance: DMatrix::from_element(1, 1, 0.1),
            }],
            b_blocks: vec![GaussianBlock::isotropic(1, 0.1)],
            lambda_x: vec![InverseGammaBlock::new(3.0, 2.0)],
            v_x_local: vec![InverseGammaBlock::new(1.0, 1.0)],
            tau_x: InverseGammaBlock::new(2.0, 1.0),
            v_x_global: InverseGammaBlock::new(1.0, 1.0),
            lambda_b: vec![InverseGammaBlock::new(2.0, 1.0)],
            v_b_local: vec![InverseGammaBlock::new(1.0, 1.0)],
            tau_b: InverseGammaBlock::new(1.0, 2.0),
            v_b_global: InverseGammaBlock::new(1.0, 1.0),
            xi: DMatrix::zeros(1, 1),
            cycle_count: 0,
            elbo_trace: vec![],
        };
        update_b(&mut s1, &cov1, &cfg1).unwrap();
        let w = (3.0 / 2.0) * 2.0; // lambda_x ratio * tau_x ratio
        let u = 2.0 * 0.5; // lambda_b ratio * tau_b ratio
        let expected = w * 1.5 * 0.9 / (w * 1.5 * 1.5 + u);
        assert_relative_eq!(s1.b_blocks[0].mean[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn scales_b_zero_moment_case() {
        let net = Network::from_edges(3, &[(0, 2)]).unwrap();
        let z = DMatrix::from_row_slice(3, 1, &[1.0, -1.0, 0.5]);
        let cov = Covariates::new(z);
        let cfg = ModelConfig::new(1, 3);
        let mut state = init_state(&net, &cov, &cfg, 0).unwrap();
        state.b_blocks[0].mean.fill(0.0);
        state.b_blocks[0].covariance = DMatrix::from_element(1, 1, 1e-300);
        update_scales_b(&mut state, &cfg).unwrap();
        // zero second moment: rate is exactly the auxiliary ratio (1 here)
        assert_relative_eq!(state.lambda_b[0].rate, 1.0, max_relative = 1e-9);
        assert_relative_eq!(state.lambda_b[0].shape, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn predict_probabilities_shapes_and_symmetry() {
        let (net, cov) = toy_instance(5, 2, 11);
        let cfg = ModelConfig::new(2, 5);
        let mut state = init_state(&net, &cov, &cfg, 0).unwrap();

        // constant field when all means vanish
        for blk in state.x_blocks.iter_mut() {
            blk.mean.fill(0.0);
        }
        state.beta_mean = -2.0;
        let probs = predict_probabilities(&state);
        for i in 0..5 {
            for j in 0..5 {
                assert_relative_eq!(probs[(i, j)], logistic(-2.0), epsilon = 1e-15);
            }
        }

        // orthogonal unit means leave off-diagonal pairs at the intercept
        state.x_blocks[0].mean = DVector::from_vec(vec![1.0, 0.0]);
        state.x_blocks[1].mean = DVector::from_vec(vec![0.0, 1.0]);
        let probs = predict_probabilities(&state);
        assert_relative_eq!(probs[(0, 1)], logistic(-2.0), epsilon = 1e-12);
        assert_relative_eq!(probs[(0, 1)], 0.1192029, max_relative = 1e-6);
        for i in 0..5 {
            for j in 0..5 {
                assert!((probs[(i, j)] - probs[(j, i)]).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn fit_cavi_loop_contract_and_determinism() {
        let (net, cov) = toy_instance(10, 4, 21);
        let cfg = ModelConfig::new(2, 10);
        let one = FitOptions {
            max_cycles: 1,
            prob_tolerance: 1e-12,
            track_elbo: true,
        };
        let (state, report) = fit_cavi(&net, &cov, &cfg, &one, 3).unwrap();
        assert_eq!(report.cycles, 1);
        assert_eq!(state.cycle_count, 1);

        let opts = FitOptions::default();
        let (s1, r1) = fit_cavi(&net, &cov, &cfg, &opts, 3).unwrap();
        let (s2, r2) = fit_cavi(&net, &cov, &cfg, &opts, 3).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(r1.cycles, r2.cycles);
        assert_eq!(r1.converged, r2.converged);
        assert_eq!(r1.final_elbo, r2.final_elbo);
    }

    #[test]
    fn fit_cavi_elbo_trace_non_decreasing() {
        let (net, cov) = toy_instance(12, 5, 33);
        let cfg = ModelConfig::new(2, 12);
        let opts = FitOptions {
            max_cycles: 40,
            prob_tolerance: 1e-7,
            track_elbo: true,
        };
        let (state, _) = fit_cavi(&net, &cov, &cfg, &opts, 5).unwrap();
        for w in state.elbo_trace.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0),
                "ELBO decreased: {} -> {}",
                w[0],
                w[1]
            );
        }
        state.check_invariants().unwrap();
    }

    #[test]
    fn fit_cavi_runs_without_covariates() {
        let (net, _) = toy_instance(10, 0, 44);
        let cov = Covariates::empty(10);
        let cfg = ModelConfig::new(2, 10);
        let opts = FitOptions {
            max_cycles: 20,
            prob_tolerance: 1e-6,
            track_elbo: true,
        };
        let (state, report) = fit_cavi(&net, &cov, &cfg, &opts, 7).unwrap();
        assert!(report.cycles >= 1);
        assert!(state.b_blocks.is_empty());
        for w in state.elbo_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0));
        }
    }
}
