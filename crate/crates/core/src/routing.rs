//! Softmax gating, sparse top-k gating, the load-balance loss, and Monte
//! Carlo estimation of the router moments.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};

pub const DEFAULT_BALANCE_COEFFICIENT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub n_experts: usize,
    pub top_k: usize,
    #[serde(default = "default_balance")]
    pub balance_coefficient: f64,
}

fn default_balance() -> f64 {
    DEFAULT_BALANCE_COEFFICIENT
}

impl GateConfig {
    pub fn new(n_experts: usize, top_k: usize) -> Result<Self> {
        let cfg = GateConfig {
            n_experts,
            top_k,
            balance_coefficient: DEFAULT_BALANCE_COEFFICIENT,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_balance(mut self, coefficient: f64) -> Result<Self> {
        self.balance_coefficient = coefficient;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 {
            return Err(Error::invalid("expert count must be at least 1"));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::invalid(format!(
                "top_k must lie in [1, {}], got {}",
                self.n_experts, self.top_k
            )));
        }
        if !(self.balance_coefficient >= 0.0 && self.balance_coefficient.is_finite()) {
            return Err(Error::invalid("balance coefficient must be non-negative"));
        }
        Ok(())
    }
}

/// Trainable gating matrix; logits are `w_zᵀ x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterState {
    pub w_z: Matrix,
}

impl RouterState {
    pub fn new(w_z: Matrix) -> Self {
        RouterState { w_z }
    }

    pub fn zeros(input_dim: usize, n_experts: usize) -> Self {
        RouterState {
            w_z: Matrix::zeros(input_dim, n_experts),
        }
    }

    /// Router whose logits are exchangeable under isotropic inputs: the
    /// columns are orthonormal and share the norm `std·√input_dim` that an
    /// i.i.d. `N(0, std²)` column would have on average. Falls back to plain
    /// i.i.d. Gaussian entries when `n_experts > input_dim`.
    pub fn symmetric<R: Rng + ?Sized>(input_dim: usize, n_experts: usize, std: f64, rng: &mut R) -> Self {
        if n_experts > input_dim {
            return RouterState {
                w_z: linalg::gaussian_matrix(input_dim, n_experts, std, rng),
            };
        }
        let q = linalg::random_orthonormal(input_dim, n_experts, rng);
        RouterState {
            w_z: q * (std * (input_dim as f64).sqrt()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.nrows()
    }

    pub fn n_experts(&self) -> usize {
        self.w_z.ncols()
    }

    pub fn logits(&self, x: &Vector) -> Result<Vector> {
        linalg::ensure_len(x, self.input_dim(), "router input")?;
        Ok(self.w_z.tr_mul(x))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    /// Selected experts, ordered by decreasing logit (ties: lower index first).
    pub selected: Vec<usize>,
    /// Renormalized top-k weights, zero outside `selected`.
    pub weights: Vector,
    /// Softmax over all logits, used by the balance loss.
    pub dense_probs: Vector,
    pub logits: Vector,
}

impl GateOutput {
    pub fn is_selected(&self, expert: usize) -> bool {
        self.selected.contains(&expert)
    }
}

pub fn softmax(logits: &Vector) -> Vector {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.map(|z| (z - max).exp());
    let total = exp.sum();
    exp / total
}

/// Indices of the `k` largest logits; on exact ties the lower index wins.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&i, &j| logits[j].total_cmp(&logits[i]).then(i.cmp(&j)));
    order.truncate(k);
    order
}

/// Top-k gating from precomputed logits.
pub fn gate_from_logits(logits: Vector, top_k: usize) -> GateOutput {
    let selected = top_k_indices(logits.as_slice(), top_k);
    let dense_probs = softmax(&logits);
    let max = logits[selected[0]];
    let mut weights = Vector::zeros(logits.len());
    let mut total = 0.0;
    for &i in &selected {
        let e = (logits[i] - max).exp();
        weights[i] = e;
        total += e;
    }
    weights /= total;
    GateOutput {
        selected,
        weights,
        dense_probs,
        logits,
    }
}

pub fn dense_gate(state: &RouterState, x: &Vector) -> Result<Vector> {
    Ok(softmax(&state.logits(x)?))
}

pub fn topk_gate(state: &RouterState, x: &Vector, config: &GateConfig) -> Result<GateOutput> {
    config.validate()?;
    if state.n_experts() != config.n_experts {
        return Err(Error::invalid(format!(
            "router has {} experts, gate config expects {}",
            state.n_experts(),
            config.n_experts
        )));
    }
    Ok(gate_from_logits(state.logits(x)?, config.top_k))
}

/// `L_b = Σᵢ fᵢ·Pᵢ` with `fᵢ = N/(kT)·countᵢ` and `Pᵢ` the batch-mean dense
/// probability. Equals 1 under perfectly uniform routing.
pub fn balance_loss(
    assignment_counts: &[usize],
    dense_probs_mean: &Vector,
    config: &GateConfig,
    token_count: usize,
) -> Result<f64> {
    config.validate()?;
    if token_count == 0 {
        return Err(Error::invalid("balance loss needs at least one token"));
    }
    let n = config.n_experts;
    if assignment_counts.len() != n || dense_probs_mean.len() != n {
        return Err(Error::invalid("balance loss inputs must have one entry per expert"));
    }
    let assigned: usize = assignment_counts.iter().sum();
    if assigned != config.top_k * token_count {
        return Err(Error::invalid(format!(
            "assignment counts sum to {assigned}, expected k·T = {}",
            config.top_k * token_count
        )));
    }
    let norm = n as f64 / (config.top_k as f64 * token_count as f64);
    Ok(assignment_counts
        .iter()
        .zip(dense_probs_mean.iter())
        .map(|(&c, &p)| norm * c as f64 * p)
        .sum())
}

/// Running per-batch routing statistics.
#[derive(Debug, Clone)]
pub struct LoadTracker {
    pub counts: Vec<usize>,
    pub prob_sum: Vector,
    pub tokens: usize,
}

impl LoadTracker {
    pub fn new(n_experts: usize) -> Self {
        LoadTracker {
            counts: vec![0; n_experts],
            prob_sum: Vector::zeros(n_experts),
            tokens: 0,
        }
    }

    pub fn record(&mut self, gate: &GateOutput) {
        for &i in &gate.selected {
            self.counts[i] += 1;
        }
        self.prob_sum += &gate.dense_probs;
        self.tokens += 1;
    }

    pub fn mean_probs(&self) -> Vector {
        &self.prob_sum / self.tokens.max(1) as f64
    }

    /// Load fractions `countᵢ / (kT)`; they sum to one.
    pub fn load_fractions(&self, top_k: usize) -> Vec<f64> {
        let total = (top_k * self.tokens).max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }

    /// The `fᵢ` factors of the balance loss.
    pub fn f_factors(&self, top_k: usize) -> Vector {
        let n = self.counts.len() as f64;
        let norm = n / (top_k as f64 * self.tokens.max(1) as f64);
        Vector::from_iterator(self.counts.len(), self.counts.iter().map(|&c| norm * c as f64))
    }

    pub fn balance_loss(&self, config: &GateConfig) -> Result<f64> {
        balance_loss(&self.counts, &self.mean_probs(), config, self.tokens)
    }
}

/// `(E[Rᵢ], Var(Rᵢ)) = (1/N, (N−k)/(kN²))`.
pub fn theoretical_moments(n_experts: usize, top_k: usize) -> Result<(f64, f64)> {
    GateConfig::new(n_experts, top_k)?;
    let n = n_experts as f64;
    let k = top_k as f64;
    Ok((1.0 / n, (n - k) / (k * n * n)))
}

/// Distribution of i.i.d. per-expert logits for moment estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LogitSampler {
    /// `spread · N(0, 1)`.
    Gaussian { spread: f64 },
    /// Uniform on `(−spread, spread)`.
    Uniform { spread: f64 },
}

impl Default for LogitSampler {
    fn default() -> Self {
        LogitSampler::Gaussian { spread: 1.0 }
    }
}

impl LogitSampler {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            LogitSampler::Gaussian { spread } => {
                let z: f64 = StandardNormal.sample(rng);
                spread * z
            }
            LogitSampler::Uniform { spread } => spread * (2.0 * rng.random::<f64>() - 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub samples: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Per-expert standard error of the mean.
    pub std_error: Vec<f64>,
}

const MOMENT_SHARDS: usize = 16;

/// Monte Carlo estimate of per-expert `E[Rᵢ]` and `Var(Rᵢ)`.
///
/// Samples are split into a fixed number of shards, each with its own
/// ChaCha stream, so the result does not depend on the thread count.
pub fn estimate_moments(
    config: &GateConfig,
    sampler: LogitSampler,
    samples: usize,
    seed: u64,
) -> Result<MomentEstimate> {
    config.validate()?;
    if samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let n = config.n_experts;
    let k = config.top_k;
    let shards: Vec<(usize, u64)> = (0..MOMENT_SHARDS)
        .map(|s| {
            let len = samples / MOMENT_SHARDS + usize::from(s < samples % MOMENT_SHARDS);
            (len, s as u64)
        })
        .collect();

    let partial: Vec<(Vec<f64>, Vec<f64>)> = shards
        .par_iter()
        .map(|&(len, stream)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let mut sum = vec![0.0; n];
            let mut sum_sq = vec![0.0; n];
            let mut logits = Vector::zeros(n);
            for _ in 0..len {
                for z in logits.iter_mut() {
                    *z = sampler.sample(&mut rng);
                }
                let gate = gate_from_logits(logits.clone(), k);
                for &i in &gate.selected {
                    let w = gate.weights[i];
                    sum[i] += w;
                    sum_sq[i] += w * w;
                }
            }
            (sum, sum_sq)
        })
        .collect();

    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    for (s, sq) in partial {
        for i in 0..n {
            sum[i] += s[i];
            sum_sq[i] += sq[i];
        }
    }
    let total = samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / total).collect();
    let variance: Vec<f64> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| (sq / total - m * m).max(0.0))
        .collect();
    let std_error = variance.iter().map(|v| (v / total).sqrt()).collect();
    Ok(MomentEstimate {
        samples,
        mean,
        variance,
        std_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn router_from_logits(logits: &[f64]) -> (RouterState, Vector) {
        // Identity router on a one-hot basis: logits equal the input.
        let n = logits.len();
        (
            RouterState::new(Matrix::identity(n, n)),
            Vector::from_column_slice(logits),
        )
    }

    #[test]
    fn zero_router_is_uniform() {
        let state = RouterState::zeros(5, 4);
        let p = dense_gate(&state, &Vector::from_element(5, 0.3)).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn hand_softmax() {
        let (state, x) = router_from_logits(&[2f64.ln(), 0.0]);
        let p = dense_gate(&state, &x).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        let shifted = dense_gate(&state, &x.add_scalar(17.5)).unwrap();
        assert!((p - shifted).amax() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let state = RouterState::zeros(5, 4);
        assert!(matches!(
            dense_gate(&state, &Vector::zeros(3)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn top2_of_4_hand_evaluation() {
        let (state, x) = router_from_logits(&[3.0, 1.0, 2.0, 0.0]);
        let cfg = GateConfig::new(4, 2).unwrap();
        let g = topk_gate(&state, &x, &cfg).unwrap();
        assert_eq!(g.selected, vec![0, 2]);
        let e = std::f64::consts::E;
        assert!((g.weights[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((g.weights[2] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert_eq!(g.weights[1], 0.0);
        assert_eq!(g.weights[3], 0.0);
        assert!((g.weights[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn full_activation_matches_dense() {
        let (state, x) = router_from_logits(&[0.4, -1.0, 2.2]);
        let cfg = GateConfig::new(3, 3).unwrap();
        let g = topk_gate(&state, &x, &cfg).unwrap();
        let d = dense_gate(&state, &x).unwrap();
        assert!((g.weights - d).amax() < 1e-15);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let (state, x) = router_from_logits(&[0.0; 8]);
        let cfg = GateConfig::new(8, 2).unwrap();
        let g = topk_gate(&state, &x, &cfg).unwrap();
        assert_eq!(g.selected, vec![0, 1]);
        assert_eq!(g.weights[0], 0.5);
        assert_eq!(g.weights[1], 0.5);
    }

    #[test]
    fn gate_config_validation() {
        assert!(GateConfig::new(0, 1).is_err());
        assert!(GateConfig::new(4, 5).is_err());
        assert!(GateConfig::new(4, 0).is_err());
        assert!(GateConfig::new(4, 2).unwrap().with_balance(-1.0).is_err());
    }

    #[test]
    fn balance_loss_uniform_and_collapse() {
        let cfg = GateConfig::new(4, 1).unwrap();
        let uniform = Vector::from_element(4, 0.25);
        assert!((balance_loss(&[5, 5, 5, 5], &uniform, &cfg, 20).unwrap() - 1.0).abs() < 1e-15);
        let collapsed = Vector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        assert!((balance_loss(&[20, 0, 0, 0], &collapsed, &cfg, 20).unwrap() - 4.0).abs() < 1e-15);
        assert!(balance_loss(&[1, 1, 1, 1], &uniform, &cfg, 0).is_err());
        assert!(balance_loss(&[1, 1, 1, 0], &uniform, &cfg, 4).is_err());
    }

    #[test]
    fn balance_loss_matches_per_token_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let cfg = GateConfig::new(6, 2).unwrap();
        let router = RouterState::new(linalg::gaussian_matrix(5, 6, 1.0, &mut rng));
        let mut tracker = LoadTracker::new(6);
        let mut gates = Vec::new();
        for _ in 0..37 {
            let x = linalg::gaussian_vector(5, 1.0, &mut rng);
            let g = topk_gate(&router, &x, &cfg).unwrap();
            tracker.record(&g);
            gates.push(g);
        }
        let fast = tracker.balance_loss(&cfg).unwrap();
        // Oracle: double sum over tokens, f from indicator, P from probabilities.
        let t = gates.len() as f64;
        let mut oracle = 0.0;
        for i in 0..6 {
            let f = 6.0 / (2.0 * t) * gates.iter().filter(|g| g.is_selected(i)).count() as f64;
            let p = gates.iter().map(|g| g.dense_probs[i]).sum::<f64>() / t;
            oracle += f * p;
        }
        assert!((fast - oracle).abs() < 1e-12);
    }

    #[test]
    fn theoretical_values() {
        let (m, v) = theoretical_moments(8, 2).unwrap();
        assert_eq!(m, 0.125);
        assert!((v - 0.046875).abs() < 1e-15);
        assert_eq!(theoretical_moments(5, 5).unwrap().1, 0.0);
        assert!(theoretical_moments(2, 3).is_err());
    }

    #[test]
    fn dense_pair_has_no_variance() {
        let cfg = GateConfig::new(2, 2).unwrap();
        let est = estimate_moments(&cfg, LogitSampler::Gaussian { spread: 1e-6 }, 5000, 4).unwrap();
        for v in &est.variance {
            assert!(*v < 1e-12);
        }
    }

    #[test]
    fn moments_are_reproducible() {
        let cfg = GateConfig::new(8, 2).unwrap();
        let a = estimate_moments(&cfg, LogitSampler::default(), 10_000, 9).unwrap();
        let b = estimate_moments(&cfg, LogitSampler::default(), 10_000, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn symmetric_router_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = RouterState::symmetric(16, 4, 0.02, &mut rng);
        let gram = r.w_z.transpose() * &r.w_z;
        let want = 0.02f64.powi(2) * 16.0;
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { want } else { 0.0 };
                assert!((gram[(i, j)] - expect).abs() < 1e-14);
            }
        }
    }
}
