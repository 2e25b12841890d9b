//! Generative model for binary networks with latent positions and node
//! covariates: data containers, the Bernoulli-logistic likelihood, and the
//! quadratic tangent bound used by the closed-form inference engine.
//!
//! Edge `(i, j)` is Bernoulli with success probability
//! `logistic(beta + x_i' x_j)`; latent positions are tied to a sparse
//! low-rank transform of the covariates through global-local shrinkage
//! priors. Only the upper triangle (`i < j`) enters the likelihood unless
//! self-loops are explicitly enabled.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Undirected binary network over `n` nodes.
///
/// Stores both the dense symmetric adjacency and the list of upper-triangular
/// positive edges, which the subsampling engine consumes directly.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    n: usize,
    adjacency: DMatrix<f64>,
    positive_edges: Vec<(usize, usize)>,
    include_diagonal: bool,
}

impl Network {
    /// Builds a network from a dense adjacency matrix.
    ///
    /// The matrix must be square, symmetric, and 0/1-valued. The diagonal is
    /// kept as given; it only enters the likelihood when `include_diagonal`
    /// is set.
    pub fn from_adjacency(adjacency: DMatrix<f64>) -> Result<Self> {
        let n = adjacency.nrows();
        if adjacency.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "adjacency columns",
                expected: n,
                got: adjacency.ncols(),
            });
        }
        for i in 0..n {
            for j in 0..n {
                let y = adjacency[(i, j)];
                if y != 0.0 && y != 1.0 {
                    return Err(Error::InvalidData {
                        location: format!("adjacency[{i},{j}]"),
                        message: format!("entry {y} is not 0 or 1"),
                    });
                }
                if j > i && adjacency[(j, i)] != y {
                    return Err(Error::InvalidData {
                        location: format!("adjacency[{i},{j}]"),
                        message: "matrix is not symmetric".to_string(),
                    });
                }
            }
        }
        let mut positive_edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if adjacency[(i, j)] == 1.0 {
                    positive_edges.push((i, j));
                }
            }
        }
        Ok(Network {
            n,
            adjacency,
            positive_edges,
            include_diagonal: false,
        })
    }

    /// Builds a network from a list of undirected edges over `n` nodes.
    /// Duplicate edges collapse; self-loops are rejected here (the I/O layer
    /// drops them with a warning before calling this).
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adjacency = DMatrix::zeros(n, n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::DimensionMismatch {
                    what: "edge endpoint",
                    expected: n,
                    got: i.max(j),
                });
            }
            if i == j {
                return Err(Error::InvalidData {
                    location: format!("edge ({i},{j})"),
                    message: "self-loop".to_string(),
                });
            }
            adjacency[(i, j)] = 1.0;
            adjacency[(j, i)] = 1.0;
        }
        Self::from_adjacency(adjacency)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    /// Upper-triangular positive edges, each with `i < j`.
    pub fn positive_edges(&self) -> &[(usize, usize)] {
        &self.positive_edges
    }

    pub fn include_diagonal(&self) -> bool {
        self.include_diagonal
    }

    pub fn edge(&self, i: usize, j: usize) -> f64 {
        self.adjacency[(i, j)]
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.n)
            .filter(|&j| j != i && self.adjacency[(i, j)] == 1.0)
            .count()
    }

    /// Count of unordered node pairs `i < j`.
    pub fn pair_count(&self) -> usize {
        self.n * (self.n - 1) / 2
    }

    /// Count of unordered non-edges among `i < j` pairs.
    pub fn negative_edge_count(&self) -> usize {
        self.pair_count() - self.positive_edges.len()
    }
}

/// Node covariates: an `n x p` real matrix, optionally row-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    z: DMatrix<f64>,
    normalized: bool,
}

impl Covariates {
    pub fn new(z: DMatrix<f64>) -> Self {
        Covariates {
            z,
            normalized: false,
        }
    }

    /// Covariate block with zero columns; the inference engines reduce to a
    /// covariate-free latent space fit on this input.
    pub fn empty(n: usize) -> Self {
        Covariates {
            z: DMatrix::zeros(n, 0),
            normalized: false,
        }
    }

    /// Rescales every nonzero row to unit Euclidean norm.
    pub fn into_row_normalized(mut self) -> Self {
        for mut row in self.z.row_iter_mut() {
            let norm = row.norm();
            if norm > 0.0 {
                row /= norm;
            }
        }
        self.normalized = true;
        self
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn p(&self) -> usize {
        self.z.ncols()
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.z.row(i).transpose()
    }

    /// Checks that the row count matches a paired network.
    pub fn check_n(&self, n: usize) -> Result<()> {
        if self.n() != n {
            return Err(Error::DimensionMismatch {
                what: "covariate rows",
                expected: n,
                got: self.n(),
            });
        }
        Ok(())
    }
}

/// Model-level configuration shared by both inference engines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Latent dimension.
    pub d: usize,
    /// Fractional-likelihood power in (0, 1]. At 1 this is the usual
    /// posterior; smaller values temper every likelihood-derived term.
    pub alpha: f64,
    /// Prior mean of the intercept.
    pub beta_prior_mean: f64,
    /// Prior variance of the intercept.
    pub beta_prior_var: f64,
}

impl ModelConfig {
    /// Configuration with the default intercept prior N(0, log n).
    pub fn new(d: usize, n: usize) -> Self {
        ModelConfig {
            d,
            alpha: 1.0,
            beta_prior_mean: 0.0,
            beta_prior_var: (n as f64).ln().max(1.0),
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(Error::invalid("latent dimension d must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.beta_prior_var > 0.0) {
            return Err(Error::invalid(format!(
                "beta prior variance must be positive, got {}",
                self.beta_prior_var
            )));
        }
        Ok(())
    }
}

/// A point in parameter space: intercept, latent positions, and covariate
/// coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentParams {
    pub beta: f64,
    /// `n x d` latent positions.
    pub x: DMatrix<f64>,
    /// `p x d` covariate coefficients.
    pub b: DMatrix<f64>,
}

impl LatentParams {
    pub fn zeros(n: usize, p: usize, d: usize) -> Self {
        LatentParams {
            beta: 0.0,
            x: DMatrix::zeros(n, d),
            b: DMatrix::zeros(p, d),
        }
    }
}

/// Summary of a fitting run, shared by both engines.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// CAVI cycles or SVI epochs executed.
    pub cycles: usize,
    /// Optimizer steps (SVI only; equals `cycles` worth of minibatches).
    pub steps: usize,
    /// Final ELBO (CAVI, when tracked).
    pub final_elbo: Option<f64>,
    /// Best exponentially smoothed ELBO (SVI).
    pub best_smoothed_elbo: Option<f64>,
    /// Whether the stopping rule fired before the cycle/epoch cap.
    pub converged: bool,
    /// Final learning rate (SVI).
    pub final_learning_rate: Option<f64>,
    /// Wall-clock time in seconds. Excluded from determinism comparisons.
    pub wall_time_secs: f64,
}

/// Numerically stable logistic function, `1 / (1 + exp(-x))`.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log logistic(x)`, stable for large |x|.
#[inline]
pub fn log_logistic(x: f64) -> f64 {
    -softplus(-x)
}

/// Bernoulli log-likelihood of the network under given parameters, scaled by
/// the fractional power `alpha`. Sums over `i < j`; the diagonal enters only
/// when the network models self-loops.
pub fn log_likelihood(net: &Network, params: &LatentParams, cfg: &ModelConfig) -> Result<f64> {
    let n = net.n();
    if params.x.nrows() != n {
        return Err(Error::DimensionMismatch {
            what: "latent position rows",
            expected: n,
            got: params.x.nrows(),
        });
    }
    if params.x.ncols() != cfg.d {
        return Err(Error::DimensionMismatch {
            what: "latent position columns",
            expected: cfg.d,
            got: params.x.ncols(),
        });
    }
    let mut total = 0.0;
    for i in 0..n {
        let xi = params.x.row(i);
        let j0 = if net.include_diagonal() { i } else { i + 1 };
        for j in j0..n {
            let eta = params.beta + xi.dot(&params.x.row(j));
            let y = net.edge(i, j);
            total += y * eta - softplus(eta);
        }
    }
    Ok(cfg.alpha * total)
}

/// Curvature coefficient of the quadratic tangent bound on the log-sigmoid,
/// `A(xi) = tanh(xi/2) / (4 xi)`, with its limit 1/8 at the origin.
pub fn jj_coefficient(xi: f64) -> Result<f64> {
    if xi < 0.0 {
        return Err(Error::invalid(format!(
            "tangent parameter must be nonnegative, got {xi}"
        )));
    }
    if xi < 1e-8 {
        Ok(0.125)
    } else {
        Ok((xi / 2.0).tanh() / (4.0 * xi))
    }
}

/// Quadratic lower bound on `log logistic(eta)` with tangent point `xi`:
/// `log logistic(xi) + (eta - xi)/2 - A(xi) (eta^2 - xi^2)`.
///
/// Tight exactly at `xi = |eta|`.
pub fn jj_lower_bound(eta: f64, xi: f64) -> Result<f64> {
    let a = jj_coefficient(xi)?;
    Ok(log_logistic(xi) + (eta - xi) / 2.0 - a * (eta * eta - xi * xi))
}
