//! The spectral LoRA mixture-of-experts layer.
//!
//! The frozen base is the pretrained weight minus the closed-form residual
//! `W_res⁺ = (1/N) Σ sᵢ Bᵢ Aᵢ`, so that the equivalent weight averaged over
//! exchangeable routing equals the pretrained weight at initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::routing::{self, GateConfig, GateOutput, LoadTracker, RouterState};
use crate::spectral::{self, ExpertAdapter, SegmentScheme};

pub const DEFAULT_RHO: f64 = 10.0;
pub const DEFAULT_ROUTER_STD: f64 = 0.02;

/// Layer scale `s`: a fixed value or `auto`, which resolves to `√(3nη/r)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleSetting {
    Fixed(f64),
    Auto,
}

impl Serialize for ScaleSetting {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ScaleSetting::Fixed(v) => ser.serialize_f64(*v),
            ScaleSetting::Auto => ser.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for ScaleSetting {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(v) => Ok(ScaleSetting::Fixed(v)),
            Raw::Int(v) => Ok(ScaleSetting::Fixed(v as f64)),
            Raw::Text(t) if t == "auto" => Ok(ScaleSetting::Auto),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "scale must be a number or \"auto\", got {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInit {
    /// Damped SVD segments with residual compensation.
    Spectral,
    /// `B = 0`, uniform `A`; the residual vanishes.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    /// Output dimension.
    pub m: usize,
    /// Input dimension.
    pub n: usize,
    pub total_rank: usize,
    pub n_experts: usize,
    pub top_k: usize,
    #[serde(default = "default_scale")]
    pub scale: ScaleSetting,
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Learning-rate ratio `η = η_FFT / η_LoRA`.
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_scheme")]
    pub scheme: SegmentScheme,
    #[serde(default)]
    pub per_expert_scaling: bool,
    #[serde(default = "default_init")]
    pub init: AdapterInit,
    #[serde(default = "default_balance")]
    pub balance_coefficient: f64,
    #[serde(default = "default_router_std")]
    pub router_std: f64,
}

fn default_scale() -> ScaleSetting {
    ScaleSetting::Auto
}
fn default_rho() -> f64 {
    DEFAULT_RHO
}
fn default_eta() -> f64 {
    1.0
}
fn default_scheme() -> SegmentScheme {
    SegmentScheme::Original
}
fn default_init() -> AdapterInit {
    AdapterInit::Spectral
}
fn default_balance() -> f64 {
    routing::DEFAULT_BALANCE_COEFFICIENT
}
fn default_router_std() -> f64 {
    DEFAULT_ROUTER_STD
}

impl LayerConfig {
    pub fn new(m: usize, n: usize, total_rank: usize, n_experts: usize, top_k: usize) -> Self {
        LayerConfig {
            m,
            n,
            total_rank,
            n_experts,
            top_k,
            scale: default_scale(),
            rho: DEFAULT_RHO,
            eta: 1.0,
            scheme: SegmentScheme::Original,
            per_expert_scaling: false,
            init: AdapterInit::Spectral,
            balance_coefficient: routing::DEFAULT_BALANCE_COEFFICIENT,
            router_std: DEFAULT_ROUTER_STD,
        }
    }

    /// Single undamped SVD adapter on the principal segment (no routing).
    pub fn single_lora(m: usize, n: usize, rank: usize) -> Self {
        LayerConfig {
            rho: 1.0,
            scheme: SegmentScheme::Principal,
            ..LayerConfig::new(m, n, rank, 1, 1)
        }
    }

    pub fn with_scale(mut self, scale: ScaleSetting) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_init(mut self, init: AdapterInit) -> Self {
        self.init = init;
        self
    }

    pub fn with_scheme(mut self, scheme: SegmentScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    /// Per-expert width `d = r/N`.
    pub fn expert_width(&self) -> usize {
        self.total_rank / self.n_experts.max(1)
    }

    pub fn gate_config(&self) -> Result<GateConfig> {
        GateConfig::new(self.n_experts, self.top_k)?.with_balance(self.balance_coefficient)
    }

    pub fn resolved_scale(&self) -> Result<f64> {
        match self.scale {
            ScaleSetting::Fixed(s) if s > 0.0 && s.is_finite() => Ok(s),
            ScaleSetting::Fixed(s) => Err(Error::invalid(format!("scale must be positive, got {s}"))),
            ScaleSetting::Auto => optimal_scale(self.n, self.total_rank, self.eta),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        if self.n_experts == 0 || self.total_rank == 0 || !self.total_rank.is_multiple_of(self.n_experts) {
            return Err(Error::invalid(format!(
                "total rank {} must be a positive multiple of the expert count {}",
                self.total_rank, self.n_experts
            )));
        }
        self.gate_config()?;
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("eta must be positive"));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid("rho must be positive"));
        }
        if !(self.router_std >= 0.0 && self.router_std.is_finite()) {
            return Err(Error::invalid("router_std must be non-negative"));
        }
        self.resolved_scale()?;
        Ok(())
    }
}

/// `s* = √(3nη/r)`.
pub fn optimal_scale(n: usize, rank: usize, eta: f64) -> Result<f64> {
    if n == 0 || rank == 0 {
        return Err(Error::invalid("input dimension and rank must be positive"));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("eta must be positive, got {eta}")));
    }
    Ok((3.0 * n as f64 * eta / rank as f64).sqrt())
}

/// Per-expert scales `sᵢ = s₁·√(σ₀/σᵢ)` so that `s₁²σ₀ = sᵢ²σᵢ`.
pub fn expert_aligned_scales(spectral_masses: &[f64], reference_scale: f64) -> Result<Vec<f64>> {
    let Some(&sigma0) = spectral_masses.first() else {
        return Err(Error::invalid("need at least one spectral mass"));
    };
    if let Some(index) = spectral_masses.iter().position(|&m| m.is_nan() || m <= 0.0) {
        return Err(Error::DegenerateSegment { index });
    }
    if !(reference_scale > 0.0 && reference_scale.is_finite()) {
        return Err(Error::invalid("reference scale must be positive"));
    }
    Ok(spectral_masses
        .iter()
        .map(|&m| reference_scale * (sigma0 / m).sqrt())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMoeLayer {
    pub config: LayerConfig,
    pub gate: GateConfig,
    /// Resolved layer scale `s`.
    pub scale: f64,
    /// Frozen `W⁰ − W_res⁺`.
    pub base: Matrix,
    /// Frozen `W_res⁺`.
    pub residual: Matrix,
    pub experts: Vec<ExpertAdapter>,
    pub router: RouterState,
    /// Excludes the router from the trainable set.
    pub router_frozen: bool,
}

pub fn init_layer(w0: &Matrix, config: &LayerConfig, seed: u64) -> Result<SpectralMoeLayer> {
    config.validate()?;
    linalg::ensure_shape(w0, config.m, config.n, "pretrained weight")?;
    linalg::ensure_finite(w0, "pretrained weight")?;
    let scale = config.resolved_scale()?;
    let width = config.expert_width();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut experts = match config.init {
        AdapterInit::Spectral => {
            let factors = spectral::svd_decompose(w0)?;
            let starts =
                spectral::segment_starts(config.scheme, factors.rank_dim(), config.n_experts, width)?;
            starts
                .iter()
                .map(|&start| {
                    let seg = spectral::extract_segment(&factors, start, width)?;
                    spectral::build_expert(&seg, scale, config.rho)
                })
                .collect::<Result<Vec<_>>>()?
        }
        AdapterInit::Zero => (0..config.n_experts)
            .map(|_| spectral::zero_init_expert(config.m, config.n, width, scale, &mut rng))
            .collect(),
    };

    if config.per_expert_scaling {
        let masses: Vec<f64> = experts
            .iter()
            .map(|e| match e.origin {
                spectral::AdapterOrigin::Spectral(info) => Ok(info.spectral_mass),
                spectral::AdapterOrigin::ZeroInit => Err(Error::invalid(
                    "per-expert scaling needs spectral experts",
                )),
            })
            .collect::<Result<_>>()?;
        let scales = expert_aligned_scales(&masses, scale)?;
        for (e, s) in experts.iter_mut().zip(scales) {
            e.scale = s;
        }
    }

    let residual = spectral::residual_from_expert_scales(&experts)?;
    let base = w0 - &residual;
    let router = RouterState::symmetric(config.n, config.n_experts, config.router_std, &mut rng);

    Ok(SpectralMoeLayer {
        config: config.clone(),
        gate: config.gate_config()?,
        scale,
        base,
        residual,
        experts,
        router,
        router_frozen: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGradient {
    pub b: Matrix,
    pub a: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    /// One entry per expert; unselected experts carry exact zeros.
    pub experts: Vec<ExpertGradient>,
    pub router: Matrix,
    /// Balance-loss value included in the gradient (0 when disabled).
    pub balance_loss: f64,
}

impl LayerGradients {
    pub fn zeros_like(layer: &SpectralMoeLayer) -> Self {
        LayerGradients {
            experts: layer
                .experts
                .iter()
                .map(|e| ExpertGradient {
                    b: Matrix::zeros(e.b.nrows(), e.b.ncols()),
                    a: Matrix::zeros(e.a.nrows(), e.a.ncols()),
                })
                .collect(),
            router: Matrix::zeros(layer.router.w_z.nrows(), layer.router.w_z.ncols()),
            balance_loss: 0.0,
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.experts
            .iter()
            .map(|g| g.b.norm_squared() + g.a.norm_squared())
            .sum::<f64>()
            + self.router.norm_squared()
    }
}

impl SpectralMoeLayer {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn gate_for(&self, x: &Vector) -> Result<GateOutput> {
        linalg::ensure_len(x, self.config.n, "layer input")?;
        routing::topk_gate(&self.router, x, &self.gate)
    }

    /// `y = base·x + Σ_{i∈S} R(x)ᵢ·sᵢ·bᵢ·(aᵢ·x)`.
    pub fn forward(&self, x: &Vector) -> Result<(Vector, GateOutput)> {
        let gate = self.gate_for(x)?;
        Ok((self.forward_with_gate(x, &gate), gate))
    }

    pub fn forward_with_gate(&self, x: &Vector, gate: &GateOutput) -> Vector {
        let mut y = &self.base * x;
        for &i in &gate.selected {
            let e = &self.experts[i];
            let ax = &e.a * x;
            y += (&e.b * ax) * (gate.weights[i] * e.scale);
        }
        y
    }

    /// Gradients of `L(y)` given `upstream = ∂L/∂y`. With `include_balance`,
    /// adds the per-sample balance term `c·(N/k)·Σ_{i∈S} pᵢ(x)`, treating the
    /// assignment indicator as constant.
    pub fn backward(&self, x: &Vector, upstream: &Vector, include_balance: bool) -> Result<LayerGradients> {
        linalg::ensure_len(upstream, self.config.m, "upstream gradient")?;
        let gate = self.gate_for(x)?;
        let mut grads = LayerGradients::zeros_like(self);
        let balance = include_balance.then(|| self.per_sample_balance_weights(&gate));
        if let Some(c) = &balance {
            grads.balance_loss = c.dot(&gate.dense_probs);
        }
        self.accumulate_gradients(x, &gate, upstream, balance.as_ref(), &mut grads);
        Ok(grads)
    }

    /// `∂L_b/∂pᵢ` for a single token.
    pub fn per_sample_balance_weights(&self, gate: &GateOutput) -> Vector {
        let n = self.n_experts();
        let coef = self.gate.balance_coefficient * n as f64 / self.gate.top_k as f64;
        let mut c = Vector::zeros(n);
        for &i in &gate.selected {
            c[i] = coef;
        }
        c
    }

    /// Adds one sample's gradients into `grads`. `balance` holds `∂L_b/∂pᵢ(x)`
    /// for the dense probabilities, if the balance term is active.
    pub fn accumulate_gradients(
        &self,
        x: &Vector,
        gate: &GateOutput,
        upstream: &Vector,
        balance: Option<&Vector>,
        grads: &mut LayerGradients,
    ) {
        let n = self.n_experts();
        let mut d_weight = Vector::zeros(n);
        for &i in &gate.selected {
            let e = &self.experts[i];
            let r = gate.weights[i];
            let ax = &e.a * x;
            let btg = e.b.tr_mul(upstream);
            d_weight[i] = e.scale * btg.dot(&ax);
            let g = &mut grads.experts[i];
            g.b.ger(r * e.scale, upstream, &ax, 1.0);
            g.a.ger(r * e.scale, &btg, x, 1.0);
        }

        let mut d_logits = Vector::zeros(n);
        if n > 1 {
            // Renormalized softmax restricted to the selected set.
            let mean: f64 = gate.selected.iter().map(|&i| gate.weights[i] * d_weight[i]).sum();
            for &j in &gate.selected {
                d_logits[j] += gate.weights[j] * (d_weight[j] - mean);
            }
            if let Some(c) = balance {
                let p = &gate.dense_probs;
                let mean = p.dot(c);
                for j in 0..n {
                    d_logits[j] += p[j] * (c[j] - mean);
                }
            }
        }
        grads.router.ger(1.0, x, &d_logits, 1.0);
    }

    /// `W̃(x) = base + Σ R(x)ᵢ·sᵢ·bᵢ·aᵢ`.
    pub fn equivalent_weight(&self, x: &Vector) -> Result<Matrix> {
        let gate = self.gate_for(x)?;
        Ok(self.weight_for_gate_weights(gate.weights.as_slice()))
    }

    /// `base + Σ wᵢ·sᵢ·bᵢ·aᵢ` for arbitrary gate weights; with `wᵢ = E[R(x)ᵢ]`
    /// this is the expectation form of the equivalent weight.
    pub fn weight_for_gate_weights(&self, weights: &[f64]) -> Matrix {
        let mut w = self.base.clone();
        for (e, &r) in self.experts.iter().zip(weights) {
            if r != 0.0 {
                w.gemm(r * e.scale, &e.b, &e.a, 1.0);
            }
        }
        w
    }

    /// Expected equivalent weight under the uniform routing mean `1/N`.
    pub fn expected_equivalent_weight(&self) -> Matrix {
        let n = self.n_experts();
        self.weight_for_gate_weights(&vec![1.0 / n as f64; n])
    }

    /// `base + sᵢ·bᵢ·aᵢ`, the full-rank weight expert `i` stands for.
    pub fn expert_equivalent_weight(&self, expert: usize) -> Matrix {
        let e = &self.experts[expert];
        let mut w = self.base.clone();
        w.gemm(e.scale, &e.b, &e.a, 1.0);
        w
    }

    /// `base + residual`, which must equal the pretrained weight.
    pub fn pretrained_weight(&self) -> Matrix {
        &self.base + &self.residual
    }

    pub fn trainable_parameter_count(&self) -> usize {
        let adapters: usize = self.experts.iter().map(ExpertAdapter::parameter_count).sum();
        let router = if self.router_frozen || self.n_experts() == 1 {
            0
        } else {
            self.router.w_z.len()
        };
        adapters + router
    }

    /// Routing statistics over a set of inputs.
    pub fn routing_load(&self, inputs: &[Vector]) -> Result<LoadTracker> {
        let mut tracker = LoadTracker::new(self.n_experts());
        for x in inputs {
            tracker.record(&self.gate_for(x)?);
        }
        Ok(tracker)
    }
}

/// `g̃ = s²(b·bᵀ·g + g·aᵀ·a)`.
pub fn equivalent_gradient_surrogate(b: &Matrix, a: &Matrix, g: &Matrix, scale: f64) -> Result<Matrix> {
    if b.ncols() != a.nrows() || g.nrows() != b.nrows() || g.ncols() != a.ncols() {
        return Err(Error::invalid(format!(
            "cannot compose b {}x{}, a {}x{}, g {}x{}",
            b.nrows(),
            b.ncols(),
            a.nrows(),
            a.ncols(),
            g.nrows(),
            g.ncols()
        )));
    }
    let bbt_g = b * b.tr_mul(g);
    let g_ata = (g * a.transpose()) * a;
    Ok((bbt_g + g_ata) * (scale * scale))
}

/// One router-frozen SGD step on the selected experts of a squared-error loss
/// at `(x, target)`; returns `‖ΔW̃ + lr·g̃‖ / ‖lr·g̃‖` where `g̃` sums the
/// per-expert surrogates weighted by the gate.
pub fn first_order_update_check(
    layer: &SpectralMoeLayer,
    x: &Vector,
    target: &Vector,
    lr: f64,
) -> Result<f64> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    linalg::ensure_len(target, layer.config.m, "target")?;
    let (y, gate) = layer.forward(x)?;
    let residual = &y - target;
    let grads = layer.backward(x, &residual, false)?;
    let full_grad = &residual * x.transpose();

    let mut delta = Matrix::zeros(layer.config.m, layer.config.n);
    let mut surrogate = Matrix::zeros(layer.config.m, layer.config.n);
    for &i in &gate.selected {
        let e = &layer.experts[i];
        let r = gate.weights[i];
        let g = &grads.experts[i];
        let b_new = &e.b - &g.b * lr;
        let a_new = &e.a - &g.a * lr;
        delta += (&b_new * &a_new - &e.b * &e.a) * (r * e.scale);
        let expert_grad = &full_grad * r;
        surrogate += equivalent_gradient_surrogate(&e.b, &e.a, &expert_grad, e.scale)? * r;
    }
    let reference = (&surrogate * lr).norm();
    if reference == 0.0 {
        return Ok(if delta.norm() == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((delta + surrogate * lr).norm() / reference)
}

/// `‖s²·mean(A₀ᵀA₀) − η·I‖_F / ‖η·I‖_F` over `draws` zero-init factors
/// `A₀ ∈ R^{r×n}`, using the given scale.
pub fn scaling_alignment_error(n: usize, rank: usize, eta: f64, scale: f64, draws: usize, seed: u64) -> Result<f64> {
    if draws == 0 {
        return Err(Error::invalid("need at least one draw"));
    }
    optimal_scale(n, rank, eta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = spectral::zero_init_bound(n);
    let mut acc = Matrix::zeros(n, n);
    // Stack draws so each accumulation is one larger product.
    const CHUNK: usize = 64;
    let mut done = 0;
    while done < draws {
        let take = CHUNK.min(draws - done);
        let mut stacked = Matrix::zeros(take * rank, n);
        for d in 0..take {
            let a0 = linalg::uniform_matrix(rank, n, bound, &mut rng);
            stacked.rows_mut(d * rank, rank).copy_from(&a0);
        }
        let stacked_t = stacked.transpose();
        acc.gemm(1.0, &stacked_t, &stacked, 1.0);
        done += take;
    }
    acc *= scale * scale / draws as f64;
    for i in 0..n {
        acc[(i, i)] -= eta;
    }
    Ok(acc.norm() / (eta * (n as f64).sqrt()))
}

/// [`scaling_alignment_error`] at the optimal scale `s*`.
pub fn scaling_alignment_check(n: usize, rank: usize, eta: f64, draws: usize, seed: u64) -> Result<f64> {
    let s = optimal_scale(n, rank, eta)?;
    scaling_alignment_error(n, rank, eta, s, draws, seed)
}

/// Monte Carlo statistics of `W̃(x)` over i.i.d. standard Gaussian inputs.
#[derive(Debug, Clone)]
pub struct EquivalentWeightStats {
    pub samples: usize,
    pub mean: Matrix,
    /// Per-entry sample standard deviation.
    pub std: Matrix,
}

impl EquivalentWeightStats {
    /// Largest `|mean − target| / (std/√samples)` over entries with nonzero
    /// spread, and the largest absolute deviation where the spread is zero.
    pub fn max_z_score(&self, target: &Matrix) -> (f64, f64) {
        let root = (self.samples as f64).sqrt();
        let mut z_max: f64 = 0.0;
        let mut flat_max: f64 = 0.0;
        for ((&m, &sd), &t) in self.mean.iter().zip(self.std.iter()).zip(target.iter()) {
            let dev = (m - t).abs();
            if sd > 0.0 {
                z_max = z_max.max(dev * root / sd);
            } else {
                flat_max = flat_max.max(dev);
            }
        }
        (z_max, flat_max)
    }
}

/// Samples `x ~ N(0, I)` and accumulates the gate weights. Since `W̃(x)` is
/// affine in `R(x)`, the per-entry sample mean and variance follow exactly
/// from the sample mean and covariance of `R(x)`.
pub fn equivalent_weight_stats(layer: &SpectralMoeLayer, samples: usize, seed: u64) -> Result<EquivalentWeightStats> {
    if samples < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let n_exp = layer.n_experts();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = Vector::zeros(n_exp);
    let mut outer = Matrix::zeros(n_exp, n_exp);
    let mut r = Vector::zeros(n_exp);
    for _ in 0..samples {
        let x = linalg::gaussian_vector(layer.config.n, 1.0, &mut rng);
        let gate = layer.gate_for(&x)?;
        r.copy_from(&gate.weights);
        sum += &r;
        outer.ger(1.0, &r, &r, 1.0);
    }
    let count = samples as f64;
    let mean_r = &sum / count;
    let cov = (outer - &mean_r * mean_r.transpose() * count) / (count - 1.0);

    let products: Vec<Matrix> = layer.experts.iter().map(|e| e.product() * e.scale).collect();
    let mean = layer.weight_for_gate_weights(mean_r.as_slice());
    let (m, n) = (layer.config.m, layer.config.n);
    let mut var = Matrix::zeros(m, n);
    for i in 0..n_exp {
        for l in 0..n_exp {
            let c = cov[(i, l)];
            if c != 0.0 {
                var += products[i].component_mul(&products[l]) * c;
            }
        }
    }
    let std = var.map(|v| v.max(0.0).sqrt());
    Ok(EquivalentWeightStats { samples, mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, gaussian_vector, rel_frobenius, rel_vec};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn optimal_scale_values() {
        assert!((optimal_scale(24, 8, 1.0).unwrap() - 3.0).abs() < 1e-15);
        assert!((optimal_scale(4096, 32, 0.1).unwrap() - 38.4f64.sqrt()).abs() < 1e-12);
        assert!((optimal_scale(4096, 32, 0.1).unwrap() - 6.19677).abs() < 1e-5);
        let mut last = 0.0;
        for n in [16, 64, 256, 1024, 4096] {
            let s = optimal_scale(n, 8, 0.5).unwrap();
            assert!(s > last);
            last = s;
        }
        assert!(optimal_scale(0, 8, 1.0).is_err());
        assert!(optimal_scale(8, 8, 0.0).is_err());
    }

    #[test]
    fn aligned_scales() {
        let s = expert_aligned_scales(&[4.0, 1.0, 1.0], 2.0).unwrap();
        assert_eq!(s, vec![2.0, 4.0, 4.0]);
        let s = expert_aligned_scales(&[3.0, 3.0], 1.5).unwrap();
        assert_eq!(s, vec![1.5, 1.5]);
        let masses = [5.0, 2.5, 0.7, 0.01];
        let s = expert_aligned_scales(&masses, 3.0).unwrap();
        for (si, mi) in s.iter().zip(masses) {
            assert!((si * si * mi - 9.0 * 5.0).abs() <= 1e-12 * 45.0);
        }
        assert!(matches!(
            expert_aligned_scales(&[1.0, 0.0], 1.0),
            Err(Error::DegenerateSegment { index: 1 })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(LayerConfig::new(8, 8, 6, 4, 2).validate().is_err());
        assert!(LayerConfig::new(8, 8, 8, 4, 5).validate().is_err());
        let mut c = LayerConfig::new(8, 8, 8, 4, 2);
        c.eta = -1.0;
        assert!(c.validate().is_err());
        let c = LayerConfig::new(8, 8, 8, 4, 2).with_rho(0.0);
        assert!(c.validate().is_err());
        let c = LayerConfig::new(8, 8, 8, 4, 2).with_scale(ScaleSetting::Fixed(-2.0));
        assert!(c.validate().is_err());
    }

    #[test]
    fn scale_setting_serde() {
        #[derive(Deserialize, Serialize)]
        struct W {
            s: ScaleSetting,
        }
        let w: W = toml::from_str("s = \"auto\"").unwrap();
        assert_eq!(w.s, ScaleSetting::Auto);
        let w: W = toml::from_str("s = 4").unwrap();
        assert_eq!(w.s, ScaleSetting::Fixed(4.0));
        let w: W = toml::from_str("s = 2.5").unwrap();
        assert_eq!(w.s, ScaleSetting::Fixed(2.5));
        assert!(toml::from_str::<W>("s = \"big\"").is_err());
    }

    #[test]
    fn single_expert_reproduces_pretrained() {
        let w0 = gaussian_matrix(10, 7, 1.0, &mut rng(1));
        let cfg = LayerConfig::new(10, 7, 3, 1, 1).with_rho(1.0);
        let layer = init_layer(&w0, &cfg, 0).unwrap();
        for seed in 0..5 {
            let x = gaussian_vector(7, 1.0, &mut rng(100 + seed));
            let (y, _) = layer.forward(&x).unwrap();
            assert!(rel_vec(&y, &(&w0 * &x)) < 1e-12);
        }
        assert!(rel_frobenius(&layer.equivalent_weight(&Vector::zeros(7)).unwrap(), &w0) < 1e-12);
    }

    #[test]
    fn zero_init_layer_is_pretrained() {
        let w0 = gaussian_matrix(9, 9, 1.0, &mut rng(2));
        let cfg = LayerConfig::new(9, 9, 6, 3, 2).with_init(AdapterInit::Zero);
        let layer = init_layer(&w0, &cfg, 5).unwrap();
        assert_eq!(layer.base, w0);
        let x = gaussian_vector(9, 1.0, &mut rng(3));
        assert_eq!(layer.forward(&x).unwrap().0, &w0 * &x);
    }

    #[test]
    fn forward_matches_materialized_weight() {
        let w0 = gaussian_matrix(16, 12, 1.0, &mut rng(4));
        let mut cfg = LayerConfig::new(16, 12, 8, 4, 2);
        cfg.router_std = 0.5;
        let layer = init_layer(&w0, &cfg, 7).unwrap();
        for s in 0..10 {
            let x = gaussian_vector(12, 1.0, &mut rng(50 + s));
            let (y, _) = layer.forward(&x).unwrap();
            let w = layer.equivalent_weight(&x).unwrap();
            assert!(rel_vec(&y, &(w * &x)) < 1e-10);
        }
        let (y0, _) = layer.forward(&Vector::zeros(12)).unwrap();
        assert_eq!(y0.amax(), 0.0);
        assert!(layer.forward(&Vector::zeros(11)).is_err());
    }

    #[test]
    fn base_plus_residual_is_pretrained() {
        let w0 = gaussian_matrix(12, 12, 1.0, &mut rng(6));
        for per_expert in [false, true] {
            let mut cfg = LayerConfig::new(12, 12, 8, 4, 2);
            cfg.per_expert_scaling = per_expert;
            let layer = init_layer(&w0, &cfg, 1).unwrap();
            assert!(rel_frobenius(&layer.pretrained_weight(), &w0) <= 1e-12);
            assert!(rel_frobenius(&layer.expected_equivalent_weight(), &w0) <= 1e-12);
        }
    }

    #[test]
    fn plain_lora_gradients_for_single_expert() {
        let w0 = gaussian_matrix(6, 5, 1.0, &mut rng(9));
        let cfg = LayerConfig::new(6, 5, 2, 1, 1).with_scale(ScaleSetting::Fixed(3.0));
        let layer = init_layer(&w0, &cfg, 0).unwrap();
        let x = gaussian_vector(5, 1.0, &mut rng(10));
        let g = gaussian_vector(6, 1.0, &mut rng(11));
        let grads = layer.backward(&x, &g, false).unwrap();
        let e = &layer.experts[0];
        let full = &g * x.transpose();
        let want_b = &full * e.a.transpose() * 3.0;
        let want_a = e.b.transpose() * &full * 3.0;
        assert!(rel_frobenius(&grads.experts[0].b, &want_b) < 1e-13);
        assert!(rel_frobenius(&grads.experts[0].a, &want_a) < 1e-13);
        assert_eq!(grads.router.amax(), 0.0);
    }

    #[test]
    fn surrogate_special_cases() {
        let g = gaussian_matrix(4, 3, 1.0, &mut rng(12));
        let a = gaussian_matrix(2, 3, 1.0, &mut rng(13));
        let b0 = Matrix::zeros(4, 2);
        let got = equivalent_gradient_surrogate(&b0, &a, &g, 2.0).unwrap();
        assert!(rel_frobenius(&got, &(&g * a.transpose() * &a * 4.0)) < 1e-14);
        let zero = equivalent_gradient_surrogate(&b0, &Matrix::zeros(2, 3), &g, 2.0).unwrap();
        assert_eq!(zero.amax(), 0.0);
        assert!(equivalent_gradient_surrogate(&b0, &a, &Matrix::zeros(3, 3), 1.0).is_err());
    }

    #[test]
    fn first_order_check_zero_upstream() {
        let w0 = gaussian_matrix(8, 6, 1.0, &mut rng(14));
        let layer = init_layer(&w0, &LayerConfig::new(8, 6, 4, 2, 1), 3).unwrap();
        let x = gaussian_vector(6, 1.0, &mut rng(15));
        let (y, _) = layer.forward(&x).unwrap();
        assert_eq!(first_order_update_check(&layer, &x, &y, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn scaling_alignment_full_rank_expectation() {
        // r = n, η = 1 gives s* = √3 and s*²·r/(3n) = 1.
        let s = optimal_scale(16, 16, 1.0).unwrap();
        assert!((s - 3f64.sqrt()).abs() < 1e-15);
        assert!((s * s * 16.0 / (3.0 * 16.0) - 1.0).abs() < 1e-15);
        let few = scaling_alignment_check(16, 16, 1.0, 10, 1).unwrap();
        let many = scaling_alignment_check(16, 16, 1.0, 4000, 1).unwrap();
        assert!(many < few);
        assert!(many < 0.05, "{many}");
    }

    #[test]
    fn weight_stats_match_materialized_samples() {
        let w0 = gaussian_matrix(8, 8, 0.5, &mut rng(21));
        let layer = init_layer(&w0, &LayerConfig::new(8, 8, 4, 4, 2), 21).unwrap();
        let samples = 300;
        let stats = equivalent_weight_stats(&layer, samples, 5).unwrap();

        let mut draw = rng(5);
        let weights: Vec<Matrix> = (0..samples)
            .map(|_| layer.equivalent_weight(&linalg::gaussian_vector(8, 1.0, &mut draw)).unwrap())
            .collect();
        let mean = weights.iter().fold(Matrix::zeros(8, 8), |acc, w| acc + w) / samples as f64;
        let var = weights
            .iter()
            .fold(Matrix::zeros(8, 8), |acc, w| acc + (w - &mean).map(|d| d * d))
            / (samples - 1) as f64;
        assert!(rel_frobenius(&stats.mean, &mean) < 1e-12);
        assert!(rel_frobenius(&stats.std, &var.map(f64::sqrt)) < 1e-9);
    }

    #[test]
    fn single_expert_weight_is_constant() {
        let w0 = gaussian_matrix(5, 5, 1.0, &mut rng(2));
        let layer = init_layer(&w0, &LayerConfig::new(5, 5, 2, 1, 1), 2).unwrap();
        let stats = equivalent_weight_stats(&layer, 50, 1).unwrap();
        assert!(stats.std.amax() == 0.0);
        let (_, flat) = stats.max_z_score(&w0);
        assert!(flat <= 1e-12 * w0.amax());
    }
}
