//! Seeded generation of the synthetic experiment designs: three
//! covariate-match regimes (well-specified, partially mismatched, fully
//! misspecified), signal-strength scaling, mismatch-ratio sweeps, and a
//! discrete community-detection variant with binary covariates.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{logistic, Covariates, Network};

/// Covariate-match regime.
///
/// - `One`: latent positions are exactly the covariate transform `Z B*`.
/// - `Two`: a few rows deviate from the transform.
/// - `Three`: every row deviates; covariates carry no network signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Case {
    One,
    Two,
    Three,
}

impl Case {
    pub fn from_index(ix: usize) -> Result<Self> {
        match ix {
            1 => Ok(Case::One),
            2 => Ok(Case::Two),
            3 => Ok(Case::Three),
            _ => Err(Error::invalid(format!("case must be 1, 2, or 3; got {ix}"))),
        }
    }

    pub fn index(self) -> usize {
        match self {
            Case::One => 1,
            Case::Two => 2,
            Case::Three => 3,
        }
    }
}

/// Distribution of covariate entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateKind {
    /// i.i.d. standard normal entries.
    Gaussian,
    /// i.i.d. +-1 with probability 1/2 each (community-detection designs).
    Binary,
}

/// Declarative description of one synthetic experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SimScenario {
    pub case: Case,
    pub n: usize,
    pub p: usize,
    pub d: usize,
    /// Number of nonzero coefficient rows.
    pub s_b: usize,
    pub beta_star: f64,
    /// Signal strength: the max-absolute entry of the scaled latent matrix.
    pub k: f64,
    /// Mismatched rows for Case 2; `None` resolves per case (0 / 5 / n).
    pub mismatch_count: Option<usize>,
    /// Alternative to `mismatch_count`: a fraction of n, rounded.
    pub mismatch_ratio: Option<f64>,
    pub covariate_kind: CovariateKind,
    /// Community designs permute mismatched rows instead of resampling them
    /// and record cluster labels from the pre-mismatch transform.
    pub community_variant: bool,
    pub seed: u64,
}

impl SimScenario {
    /// Probability-recovery design with Gaussian covariates and the default
    /// coefficient value set.
    pub fn new(case: Case, n: usize, p: usize, d: usize, k: f64, seed: u64) -> Self {
        SimScenario {
            case,
            n,
            p,
            d,
            s_b: 5,
            beta_star: -2.0,
            k,
            mismatch_count: None,
            mismatch_ratio: None,
            covariate_kind: CovariateKind::Gaussian,
            community_variant: false,
            seed,
        }
    }

    /// Community-detection design: binary covariates, 4 nonzero coefficient
    /// rows with values in {-1, +1}.
    pub fn community(case: Case, n: usize, p: usize, d: usize, k: f64, seed: u64) -> Self {
        SimScenario {
            s_b: 4,
            covariate_kind: CovariateKind::Binary,
            community_variant: true,
            ..SimScenario::new(case, n, p, d, k, seed)
        }
    }

    /// Values for nonzero coefficient rows.
    pub fn value_set(&self) -> &'static [f64] {
        if self.community_variant {
            &[-1.0, 1.0]
        } else {
            &[-2.0, 2.0, -1.5, 1.5]
        }
    }

    /// Number of rows whose latent positions deviate from the covariate
    /// transform, after resolving defaults and ratios.
    pub fn resolved_mismatch_count(&self) -> usize {
        match self.case {
            Case::One => 0,
            Case::Three => self.n,
            Case::Two => {
                if let Some(c) = self.mismatch_count {
                    c.min(self.n)
                } else if let Some(r) = self.mismatch_ratio {
                    ((self.n as f64 * r).round() as usize).min(self.n)
                } else {
                    5.min(self.n)
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s_b > self.p {
            return Err(Error::invalid(format!(
                "s_b={} exceeds p={}",
                self.s_b, self.p
            )));
        }
        if self.resolved_mismatch_count() > self.n {
            return Err(Error::invalid("mismatch count exceeds n"));
        }
        if !(self.k > 0.0) {
            return Err(Error::invalid("signal strength k must be positive"));
        }
        if let Some(r) = self.mismatch_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("mismatch ratio {r} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Fully realized synthetic instance: data plus the generating truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub scenario: SimScenario,
    pub z: Covariates,
    /// `p x d` true coefficients, exactly `s_b` nonzero rows.
    pub b_star: DMatrix<f64>,
    /// `n x d` true latent positions after signal scaling.
    pub x_star: DMatrix<f64>,
    pub network: Network,
    /// True edge probabilities (upper triangle meaningful).
    pub probabilities: DMatrix<f64>,
    /// Cluster ids of the pre-mismatch transform rows (community designs).
    pub true_labels: Option<Vec<usize>>,
    pub mismatched_rows: Vec<usize>,
}

/// Draws the covariate matrix for a scenario.
pub fn gen_covariates(scenario: &SimScenario, rng: &mut ChaCha8Rng) -> Covariates {
    let z = match scenario.covariate_kind {
        CovariateKind::Gaussian => {
            DMatrix::from_fn(scenario.n, scenario.p, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            })
        }
        CovariateKind::Binary => DMatrix::from_fn(scenario.n, scenario.p, |_, _| {
            if rng.random_bool(0.5) {
                1.0
            } else {
                -1.0
            }
        }),
    };
    Covariates::new(z)
}

/// Draws the true coefficient matrix: `s_b` uniformly chosen rows filled
/// entrywise from the scenario's value set, the rest zero.
pub fn gen_coefficients(scenario: &SimScenario, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(scenario.p, scenario.d);
    let mut rows: Vec<usize> = (0..scenario.p).collect();
    rows.shuffle(rng);
    let set = scenario.value_set();
    for &r in rows.iter().take(scenario.s_b) {
        for c in 0..scenario.d {
            b[(r, c)] = set[rng.random_range(0..set.len())];
        }
    }
    b
}

/// Builds the true latent positions from the covariate transform, applies
/// the case's mismatch mechanism, and rescales so the max absolute entry
/// equals `k`. Returns the positions, the mismatched row set, and (for
/// community designs) cluster labels of the pre-mismatch transform.
pub fn gen_latents(
    scenario: &SimScenario,
    z: &Covariates,
    b_star: &DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(DMatrix<f64>, Vec<usize>, Option<Vec<usize>>)> {
    let mut x_tilde = z.z() * b_star;
    let true_labels = scenario
        .community_variant
        .then(|| distinct_row_labels(&x_tilde));

    let m = scenario.resolved_mismatch_count();
    let mut selected: Vec<usize> = (0..scenario.n).collect();
    selected.shuffle(rng);
    selected.truncate(m);
    selected.sort_unstable();

    if m > 0 {
        if scenario.community_variant {
            // permute the selected rows among themselves
            let snapshot: Vec<Vec<f64>> = selected
                .iter()
                .map(|&r| x_tilde.row(r).iter().copied().collect())
                .collect();
            let mut perm: Vec<usize> = (0..m).collect();
            perm.shuffle(rng);
            for (slot, &dest) in selected.iter().enumerate() {
                for c in 0..scenario.d {
                    x_tilde[(dest, c)] = snapshot[perm[slot]][c];
                }
            }
        } else {
            for &r in &selected {
                for c in 0..scenario.d {
                    x_tilde[(r, c)] = rng.random_range(-2.0..2.0);
                }
            }
        }
    }

    let max_abs = x_tilde.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if max_abs == 0.0 {
        return Err(Error::numerical(
            "latent transform is identically zero; cannot scale to signal strength k".to_string(),
        ));
    }
    let x_star = x_tilde * (scenario.k / max_abs);
    Ok((x_star, selected, true_labels))
}

fn distinct_row_labels(x: &DMatrix<f64>) -> Vec<usize> {
    use std::collections::HashMap;
    let mut ids: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut labels = Vec::with_capacity(x.nrows());
    for row in x.row_iter() {
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        let next = ids.len();
        labels.push(*ids.entry(key).or_insert(next));
    }
    labels
}

/// Draws the network: independent Bernoulli edges with probability
/// `logistic(beta_star + x_i' x_j)` for `i < j`. Also returns the
/// probability matrix.
pub fn gen_network(
    x_star: &DMatrix<f64>,
    beta_star: f64,
    rng: &mut ChaCha8Rng,
) -> (Network, DMatrix<f64>) {
    let n = x_star.nrows();
    let mut adjacency = DMatrix::zeros(n, n);
    let mut probs = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let eta = beta_star + x_star.row(i).dot(&x_star.row(j));
            let p = logistic(eta);
            probs[(i, j)] = p;
            probs[(j, i)] = p;
            if rng.random_bool(p) {
                adjacency[(i, j)] = 1.0;
                adjacency[(j, i)] = 1.0;
            }
        }
    }
    let network = Network::from_adjacency(adjacency).expect("generated adjacency is valid");
    (network, probs)
}

/// Generates the full instance for a scenario, deterministically from its
/// seed.
pub fn generate(scenario: &SimScenario) -> Result<SimTruth> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let z = gen_covariates(scenario, &mut rng);
    let b_star = gen_coefficients(scenario, &mut rng);
    let (x_star, mismatched_rows, true_labels) = gen_latents(scenario, &z, &b_star, &mut rng)?;
    let (network, probabilities) = gen_network(&x_star, scenario.beta_star, &mut rng);
    Ok(SimTruth {
        scenario: scenario.clone(),
        z,
        b_star,
        x_star,
        network,
        probabilities,
        true_labels,
        mismatched_rows,
    })
}

/// Cross-product of scenario settings; each cell carries an independently
/// derived seed so cells can be generated in parallel and reproduced alone.
#[derive(Debug, Clone)]
pub struct ScenarioGrid {
    pub base: SimScenario,
    pub cases: Vec<Case>,
    pub signal_strengths: Vec<f64>,
    /// Empty means "use the base scenario's mismatch settings".
    pub mismatch_ratios: Vec<f64>,
}

impl ScenarioGrid {
    /// Expands the grid into `cases x ks x ratios x replicates` scenarios.
    pub fn expand(&self, replicates: usize, master_seed: u64) -> Vec<SimScenario> {
        let ratios: Vec<Option<f64>> = if self.mismatch_ratios.is_empty() {
            vec![self.base.mismatch_ratio]
        } else {
            self.mismatch_ratios.iter().copied().map(Some).collect()
        };
        let mut out = Vec::new();
        for &case in &self.cases {
            for &k in &self.signal_strengths {
                for &ratio in &ratios {
                    for rep in 0..replicates {
                        let mut s = self.base.clone();
                        s.case = case;
                        s.k = k;
                        s.mismatch_ratio = ratio;
                        s.seed = derive_seed(master_seed, case.index(), k, ratio, rep);
                        out.push(s);
                    }
                }
            }
        }
        out
    }
}

/// Stable seed derivation: FNV-1a over the canonical encoding of the cell
/// coordinates. Independent of platform hashers so manifests reproduce.
pub fn derive_seed(master: u64, case: usize, k: f64, ratio: Option<f64>, rep: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(b"calsm.grid.v1");
    eat(&master.to_le_bytes());
    eat(&(case as u64).to_le_bytes());
    eat(&k.to_bits().to_le_bytes());
    eat(&ratio.unwrap_or(f64::NAN).to_bits().to_le_bytes());
    eat(&(rep as u64).to_le_bytes());
    h
}
