//! Synthetic teacher tasks, training loops, and the convergence, forgetting
//! and expert-count experiments built on them.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{self, AdapterInit, LayerConfig, LayerGradients, SpectralMoeLayer};
use crate::linalg::{self, Matrix, Vector};
use crate::oracles::{self, FullFtModel, LossKind, UpcycledMoeModel};
use crate::routing::{self, GateOutput};
use crate::spectral::{self, SvdFactors};

/// Inputs with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vector>,
    pub targets: Vec<Vector>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// A source of regression examples.
pub trait Workload: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// One example; `noisy = false` yields the clean teacher output.
    fn sample(&self, rng: &mut ChaCha8Rng, noisy: bool) -> (Vector, Vector);

    fn sample_batch(&self, rng: &mut ChaCha8Rng, size: usize) -> Batch {
        let (inputs, targets) = (0..size).map(|_| self.sample(rng, true)).unzip();
        Batch { inputs, targets }
    }

    /// Fixed noise-free evaluation set.
    fn eval_set(&self, size: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, targets) = (0..size).map(|_| self.sample(&mut rng, false)).unzip();
        Batch { inputs, targets }
    }
}

/// Linear teacher `y = W*·x + ε` with `x ~ N(μ, σ²I)` and `ε ~ N(0, noise²I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTask {
    pub w_star: Matrix,
    pub input_mean: Vector,
    /// Per-coordinate input standard deviation.
    pub input_std: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl TeacherTask {
    pub fn new(w_star: Matrix, input_mean: Vector, input_std: f64, noise_std: f64, seed: u64) -> Result<Self> {
        linalg::ensure_finite(&w_star, "teacher weight")?;
        linalg::ensure_len(&input_mean, w_star.ncols(), "input mean")?;
        if !(noise_std >= 0.0 && input_std >= 0.0) {
            return Err(Error::invalid("noise and input standard deviations must be non-negative"));
        }
        Ok(TeacherTask {
            w_star,
            input_mean,
            input_std,
            noise_std,
            seed,
        })
    }
}

impl Workload for TeacherTask {
    fn input_dim(&self) -> usize {
        self.w_star.ncols()
    }

    fn output_dim(&self) -> usize {
        self.w_star.nrows()
    }

    fn sample(&self, rng: &mut ChaCha8Rng, noisy: bool) -> (Vector, Vector) {
        let x = &self.input_mean + linalg::gaussian_vector(self.input_dim(), self.input_std, rng);
        let mut y = &self.w_star * &x;
        if noisy && self.noise_std > 0.0 {
            y += linalg::gaussian_vector(self.output_dim(), self.noise_std, rng);
        }
        (x, y)
    }
}

/// Uniform mixture of tasks sharing input and output dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMixture {
    pub components: Vec<TeacherTask>,
}

impl TaskMixture {
    pub fn new(components: Vec<TeacherTask>) -> Result<Self> {
        let first = components.first().ok_or_else(|| Error::invalid("mixture needs a task"))?;
        let shape = first.w_star.shape();
        if components.iter().any(|t| t.w_star.shape() != shape) {
            return Err(Error::invalid("mixture components must share a shape"));
        }
        Ok(TaskMixture { components })
    }
}

impl Workload for TaskMixture {
    fn input_dim(&self) -> usize {
        self.components[0].input_dim()
    }

    fn output_dim(&self) -> usize {
        self.components[0].output_dim()
    }

    fn sample(&self, rng: &mut ChaCha8Rng, noisy: bool) -> (Vector, Vector) {
        let c = rng.random_range(0..self.components.len());
        self.components[c].sample(rng, noisy)
    }
}

/// Singular-value profile of a teacher, indexed in basis order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum SpectrumProfile {
    Flat { value: f64 },
    /// `σⱼ = scale·(j+1)^(−exponent)`.
    PowerLaw { scale: f64, exponent: f64 },
    /// Unit values on `[start, start+width)` holding `energy_fraction` of
    /// `Σσ²`; equal smaller values elsewhere.
    SegmentConcentrated { start: usize, width: usize, energy_fraction: f64 },
}

impl SpectrumProfile {
    pub fn values(&self, h: usize) -> Result<Vector> {
        match *self {
            SpectrumProfile::Flat { value } if value >= 0.0 => Ok(Vector::from_element(h, value)),
            SpectrumProfile::PowerLaw { scale, exponent } if scale >= 0.0 && exponent.is_finite() => {
                Ok(Vector::from_fn(h, |j, _| scale * ((j + 1) as f64).powf(-exponent)))
            }
            SpectrumProfile::SegmentConcentrated {
                start,
                width,
                energy_fraction,
            } => {
                if width == 0 || start + width > h {
                    return Err(Error::invalid(format!(
                        "band [{start}, {}) does not fit in {h} singular values",
                        start + width
                    )));
                }
                if !(energy_fraction > 0.0 && energy_fraction <= 1.0) {
                    return Err(Error::invalid("energy fraction must lie in (0, 1]"));
                }
                let outside = h - width;
                let low = if outside == 0 {
                    0.0
                } else {
                    (width as f64 * (1.0 - energy_fraction) / (energy_fraction * outside as f64)).sqrt()
                };
                Ok(Vector::from_fn(h, |j, _| if (start..start + width).contains(&j) { 1.0 } else { low }))
            }
            _ => Err(Error::invalid(format!("invalid spectrum profile {self:?}"))),
        }
    }
}

/// Teacher `U·diag(σ)·Vᵀ` over a random orthonormal basis, with zero-mean
/// inputs of per-coordinate standard deviation `1/√n`.
pub fn make_teacher_task(m: usize, n: usize, profile: SpectrumProfile, noise_std: f64, seed: u64) -> Result<TeacherTask> {
    if m == 0 || n == 0 {
        return Err(Error::invalid("teacher dimensions must be positive"));
    }
    let h = m.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = linalg::random_orthonormal(m, h, &mut rng);
    let v = linalg::random_orthonormal(n, h, &mut rng);
    let w_star = linalg::compose(&u, &profile.values(h)?, &v);
    TeacherTask::new(w_star, Vector::zeros(n), 1.0 / (n as f64).sqrt(), noise_std, seed)
}

/// Shape of a family of fine-tuning tasks around one pretrained weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub m: usize,
    pub n: usize,
    /// Power-law decay of the pretrained spectrum.
    #[serde(default = "default_decay")]
    pub pretrained_decay: f64,
    /// Singular directions each task shifts.
    #[serde(default = "default_band_width")]
    pub band_width: usize,
    /// Relative gain applied to each shifted singular value.
    #[serde(default = "default_amplitude")]
    pub shift_amplitude: f64,
    /// Norm of each task's input mean; means are mutually orthogonal.
    #[serde(default = "default_offset")]
    pub input_offset: f64,
    /// Expected input noise norm; per-coordinate std is this over `√n`.
    #[serde(default = "default_spread")]
    pub input_spread: f64,
    #[serde(default)]
    pub noise_std: f64,
}

fn default_decay() -> f64 {
    0.5
}
fn default_band_width() -> usize {
    2
}
fn default_amplitude() -> f64 {
    1.0
}
fn default_offset() -> f64 {
    1.0
}
fn default_spread() -> f64 {
    1.0
}

impl SuiteSpec {
    pub fn new(m: usize, n: usize) -> Self {
        SuiteSpec {
            m,
            n,
            pretrained_decay: default_decay(),
            band_width: default_band_width(),
            shift_amplitude: default_amplitude(),
            input_offset: default_offset(),
            input_spread: default_spread(),
            noise_std: 0.0,
        }
    }
}

/// A pretrained weight and tasks that each amplify a disjoint band of its
/// singular values under their own input distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub pretrained: Matrix,
    pub tasks: Vec<TeacherTask>,
    /// First singular index of each task's band.
    pub band_starts: Vec<usize>,
    pub band_width: usize,
}

impl TaskSuite {
    /// `W*_c − W⁰` for every task.
    pub fn shifts(&self) -> Vec<Matrix> {
        self.tasks.iter().map(|t| &t.w_star - &self.pretrained).collect()
    }

    pub fn mixture(&self) -> Result<TaskMixture> {
        TaskMixture::new(self.tasks.clone())
    }
}

/// Task `c` of `count` amplifies singular values `[c·h/count, c·h/count + w)`
/// of the pretrained weight.
pub fn make_task_suite(spec: &SuiteSpec, count: usize, seed: u64) -> Result<TaskSuite> {
    let h = spec.m.min(spec.n);
    if count == 0 || spec.band_width == 0 || count * spec.band_width > h {
        return Err(Error::InsufficientRank {
            needed: count * spec.band_width.max(1),
            available: h,
        });
    }
    if count > spec.n {
        return Err(Error::invalid("more tasks than input dimensions for orthogonal input means"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = linalg::random_orthonormal(spec.m, h, &mut rng);
    let v = linalg::random_orthonormal(spec.n, h, &mut rng);
    let sigma = SpectrumProfile::PowerLaw {
        scale: 1.0,
        exponent: spec.pretrained_decay,
    }
    .values(h)?;
    let pretrained = linalg::compose(&u, &sigma, &v);
    let means = linalg::random_orthonormal(spec.n, count, &mut rng) * spec.input_offset;
    let input_std = spec.input_spread / (spec.n as f64).sqrt();

    let stride = h / count;
    let band_starts: Vec<usize> = (0..count).map(|c| c * stride).collect();
    let tasks = band_starts
        .iter()
        .enumerate()
        .map(|(c, &start)| {
            let mut shifted = sigma.clone();
            for j in start..start + spec.band_width {
                shifted[j] *= 1.0 + spec.shift_amplitude;
            }
            let w_star = linalg::compose(&u, &shifted, &v);
            TeacherTask::new(
                w_star,
                means.column(c).into_owned(),
                input_std,
                spec.noise_std,
                seed.wrapping_add(c as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskSuite {
        pretrained,
        tasks,
        band_starts,
        band_width: spec.band_width,
    })
}

/// Sequential-task suite with default shape: disjoint shift bands, hence
/// mutually orthogonal task-specific subspaces, and distinct input means.
pub fn make_sequential_tasks(count: usize, m: usize, n: usize, seed: u64) -> Result<TaskSuite> {
    make_task_suite(&SuiteSpec::new(m, n), count, seed)
}

/// Largest cosine of the principal angles between two column spans.
pub fn max_principal_cosine(a: &Matrix, b: &Matrix) -> Result<f64> {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let cross = qa.transpose() * qb;
    let svd = spectral::svd_decompose(&cross)?;
    Ok(svd.s.iter().copied().fold(0.0, f64::max))
}

/// Leading `rank` left singular vectors.
pub fn dominant_subspace(w: &Matrix, rank: usize) -> Result<Matrix> {
    let f: SvdFactors = spectral::svd_decompose(w)?;
    if rank == 0 || rank > f.rank_dim() {
        return Err(Error::InsufficientRank {
            needed: rank,
            available: f.rank_dim(),
        });
    }
    Ok(f.u.columns(0, rank).into_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    /// Heavy-ball momentum; not covered by the alignment analysis.
    SgdMomentum { momentum: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Not part of the serialized form; runs take the experiment seed.
    #[serde(skip)]
    pub seed: u64,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
    #[serde(default = "default_balance")]
    pub balance_coefficient: f64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

fn default_batch() -> usize {
    32
}
fn default_optimizer() -> Optimizer {
    Optimizer::Sgd
}
fn default_balance() -> f64 {
    routing::DEFAULT_BALANCE_COEFFICIENT
}
fn default_eval_every() -> usize {
    0
}
fn default_eval_samples() -> usize {
    512
}

impl TrainConfig {
    pub fn new(lr: f64, steps: usize, seed: u64) -> Self {
        TrainConfig {
            lr,
            steps,
            batch_size: default_batch(),
            seed,
            optimizer: Optimizer::Sgd,
            balance_coefficient: default_balance(),
            eval_every: 0,
            eval_samples: default_eval_samples(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_samples == 0 {
            return Err(Error::invalid("steps, batch size and eval samples must be positive"));
        }
        if self.balance_coefficient.is_nan() || self.balance_coefficient < 0.0 {
            return Err(Error::invalid("balance coefficient must be non-negative"));
        }
        if let Optimizer::SgdMomentum { momentum } = self.optimizer {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::invalid("momentum must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Gradients and statistics of one mini-batch.
#[derive(Debug, Clone)]
pub struct StepStats {
    /// Same order as [`Trainable::parameters_mut`].
    pub grads: Vec<Matrix>,
    pub task_loss: f64,
    pub balance_loss: f64,
    /// Per-expert share of assignments; empty for dense models.
    pub load: Vec<f64>,
}

/// A model the harness can optimize.
pub trait Trainable: Clone + Send + Sync {
    fn predict(&self, x: &Vector) -> Result<Vector>;

    /// Mean squared-error loss over the batch plus, for routed models,
    /// `balance_coefficient·L_b`.
    fn batch_gradients(&self, batch: &Batch, balance_coefficient: f64) -> Result<StepStats>;

    fn parameters_mut(&mut self) -> Vec<&mut Matrix>;

    fn trainable_parameter_count(&self) -> usize;

    /// Per-expert load fractions over `inputs`; `None` for dense models.
    fn routing_load(&self, _inputs: &[Vector]) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

/// Batch-level balance loss `Σ fᵢPᵢ` and `∂L_b/∂pᵢ(x)` shared by every token.
fn batch_balance(gates: &[GateOutput], top_k: usize) -> (Vec<f64>, f64, Vector) {
    let n = gates[0].dense_probs.len();
    let t = gates.len() as f64;
    let mut counts = vec![0usize; n];
    let mut probs = Vector::zeros(n);
    for g in gates {
        for &i in &g.selected {
            counts[i] += 1;
        }
        probs += &g.dense_probs;
    }
    probs /= t;
    let f = Vector::from_fn(n, |i, _| n as f64 / (top_k as f64 * t) * counts[i] as f64);
    let load = counts.iter().map(|&c| c as f64 / (top_k as f64 * t)).collect();
    (load, f.dot(&probs), f / t)
}

impl Trainable for SpectralMoeLayer {
    fn predict(&self, x: &Vector) -> Result<Vector> {
        Ok(self.forward(x)?.0)
    }

    fn batch_gradients(&self, batch: &Batch, balance_coefficient: f64) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let inv = 1.0 / batch.len() as f64;
        let gates = batch.inputs.iter().map(|x| self.gate_for(x)).collect::<Result<Vec<_>>>()?;
        let (load, lb, df) = batch_balance(&gates, self.gate.top_k);
        let routed = self.n_experts() > 1;
        let balance = (routed && balance_coefficient > 0.0).then(|| df * balance_coefficient);

        let mut grads = LayerGradients::zeros_like(self);
        let mut loss = 0.0;
        for ((x, t), gate) in batch.inputs.iter().zip(&batch.targets).zip(&gates) {
            linalg::ensure_len(t, self.config.m, "target")?;
            let r = self.forward_with_gate(x, gate) - t;
            loss += 0.5 * r.norm_squared();
            self.accumulate_gradients(x, gate, &(r * inv), balance.as_ref(), &mut grads);
        }

        let mut flat = Vec::with_capacity(2 * self.n_experts() + 1);
        for g in grads.experts {
            flat.push(g.b);
            flat.push(g.a);
        }
        if self.router_trainable() {
            flat.push(grads.router);
        }
        Ok(StepStats {
            grads: flat,
            task_loss: loss * inv,
            balance_loss: if routed { lb } else { 0.0 },
            load: if routed { load } else { Vec::new() },
        })
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let router = self.router_trainable();
        let mut params: Vec<&mut Matrix> = Vec::with_capacity(2 * self.experts.len() + 1);
        for e in self.experts.iter_mut() {
            params.push(&mut e.b);
            params.push(&mut e.a);
        }
        if router {
            params.push(&mut self.router.w_z);
        }
        params
    }

    fn trainable_parameter_count(&self) -> usize {
        SpectralMoeLayer::trainable_parameter_count(self)
    }

    fn routing_load(&self, inputs: &[Vector]) -> Result<Option<Vec<f64>>> {
        if self.n_experts() == 1 {
            return Ok(None);
        }
        Ok(Some(SpectralMoeLayer::routing_load(self, inputs)?.load_fractions(self.gate.top_k)))
    }
}

impl SpectralMoeLayer {
    /// Whether the router is updated by training.
    pub fn router_trainable(&self) -> bool {
        !self.router_frozen && self.n_experts() > 1
    }
}

impl Trainable for FullFtModel {
    fn predict(&self, x: &Vector) -> Result<Vector> {
        self.forward(x)
    }

    fn batch_gradients(&self, batch: &Batch, _balance_coefficient: f64) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let inv = 1.0 / batch.len() as f64;
        let mut g = Matrix::zeros(self.w.nrows(), self.w.ncols());
        let mut loss = 0.0;
        for (x, t) in batch.inputs.iter().zip(&batch.targets) {
            let y = self.forward(x)?;
            let (l, dy) = oracles::loss_and_grad(LossKind::SquaredError, &y, t)?;
            loss += l;
            g.ger(inv, &dy, x, 1.0);
        }
        Ok(StepStats {
            grads: vec![g],
            task_loss: loss * inv,
            balance_loss: 0.0,
            load: Vec::new(),
        })
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w]
    }

    fn trainable_parameter_count(&self) -> usize {
        self.w.len()
    }
}

impl Trainable for UpcycledMoeModel {
    fn predict(&self, x: &Vector) -> Result<Vector> {
        Ok(self.forward(x)?.0)
    }

    fn batch_gradients(&self, batch: &Batch, balance_coefficient: f64) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let inv = 1.0 / batch.len() as f64;
        let n = self.experts.len();
        let (rows, cols) = self.experts[0].shape();
        let mut expert_grads = vec![Matrix::zeros(rows, cols); n];
        let mut router_grad = Matrix::zeros(self.router.w_z.nrows(), n);
        let mut gates = Vec::with_capacity(batch.len());
        let mut loss = 0.0;
        for (x, t) in batch.inputs.iter().zip(&batch.targets) {
            let step = oracles::upcycled_forward_backward(self, x, t, LossKind::SquaredError)?;
            loss += step.loss;
            for (acc, g) in expert_grads.iter_mut().zip(&step.expert_grads) {
                *acc += g * inv;
            }
            router_grad += step.router_grad * inv;
            gates.push(step.gate);
        }
        let (load, lb, df) = batch_balance(&gates, self.gate.top_k);
        if n > 1 && balance_coefficient > 0.0 {
            let c = df * balance_coefficient;
            for (x, gate) in batch.inputs.iter().zip(&gates) {
                let p = &gate.dense_probs;
                let mean = p.dot(&c);
                let dz = Vector::from_fn(n, |j, _| p[j] * (c[j] - mean));
                router_grad.ger(1.0, x, &dz, 1.0);
            }
        }
        let mut grads = expert_grads;
        if !self.router_frozen && n > 1 {
            grads.push(router_grad);
        }
        Ok(StepStats {
            grads,
            task_loss: loss * inv,
            balance_loss: if n > 1 { lb } else { 0.0 },
            load: if n > 1 { load } else { Vec::new() },
        })
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let router = !self.router_frozen && self.experts.len() > 1;
        let mut params: Vec<&mut Matrix> = self.experts.iter_mut().collect();
        if router {
            params.push(&mut self.router.w_z);
        }
        params
    }

    fn trainable_parameter_count(&self) -> usize {
        UpcycledMoeModel::trainable_parameter_count(self)
    }

    fn routing_load(&self, inputs: &[Vector]) -> Result<Option<Vec<f64>>> {
        if self.experts.len() == 1 {
            return Ok(None);
        }
        let mut tracker = routing::LoadTracker::new(self.experts.len());
        for x in inputs {
            tracker.record(&routing::topk_gate(&self.router, x, &self.gate)?);
        }
        Ok(Some(tracker.load_fractions(self.gate.top_k)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub loss: f64,
    /// Per-expert load on the evaluation set; empty for dense models.
    pub load: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mini-batch task loss before each update.
    pub task_loss: Vec<f64>,
    pub balance_loss: Vec<f64>,
    /// Per-step, per-expert load fractions; empty rows for dense models.
    pub expert_load: Vec<Vec<f64>>,
    pub grad_norm: Vec<f64>,
    /// Noise-free loss on a fixed evaluation set, including step 0.
    pub eval: Vec<EvalPoint>,
    pub final_eval: f64,
}

impl TrainLog {
    pub fn steps(&self) -> usize {
        self.task_loss.len()
    }

    /// Smallest evaluation-set load fraction any expert had at any
    /// evaluation point.
    pub fn min_load(&self) -> Option<f64> {
        self.eval.iter().flat_map(|p| p.load.iter()).copied().reduce(f64::min)
    }
}

/// Mean `½‖f(x) − t‖²` over a batch.
pub fn evaluate<M: Trainable>(model: &M, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let mut total = 0.0;
    for (x, t) in batch.inputs.iter().zip(&batch.targets) {
        total += 0.5 * (model.predict(x)? - t).norm_squared();
    }
    Ok(total / batch.len() as f64)
}

fn eval_point<M: Trainable>(model: &M, set: &Batch, step: usize) -> Result<EvalPoint> {
    Ok(EvalPoint {
        step,
        loss: evaluate(model, set)?,
        load: model.routing_load(&set.inputs)?.unwrap_or_default(),
    })
}

/// Evaluation-set seed paired with a training seed.
fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_e7a1_0000_0001
}

/// Trains `model` in place. Deterministic in `(model, task, config)`.
pub fn train<M: Trainable, W: Workload + ?Sized>(model: &mut M, task: &W, config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    let eval_set = task.eval_set(config.eval_samples, eval_seed(config.seed));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity: Option<Vec<Matrix>> = None;

    let mut log = TrainLog {
        task_loss: Vec::with_capacity(config.steps),
        balance_loss: Vec::with_capacity(config.steps),
        expert_load: Vec::with_capacity(config.steps),
        grad_norm: Vec::with_capacity(config.steps),
        eval: vec![eval_point(model, &eval_set, 0)?],
        final_eval: f64::NAN,
    };

    for step in 0..config.steps {
        let batch = task.sample_batch(&mut rng, config.batch_size);
        let stats = model.batch_gradients(&batch, config.balance_coefficient)?;
        let norm = stats.grads.iter().map(Matrix::norm_squared).sum::<f64>().sqrt();
        if !stats.task_loss.is_finite() || !norm.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        match config.optimizer {
            Optimizer::Sgd => {
                for (p, g) in model.parameters_mut().into_iter().zip(&stats.grads) {
                    p.zip_apply(g, |w, d| *w -= config.lr * d);
                }
            }
            Optimizer::SgdMomentum { momentum } => {
                let v = velocity.get_or_insert_with(|| {
                    stats.grads.iter().map(|g| Matrix::zeros(g.nrows(), g.ncols())).collect()
                });
                for ((p, g), v) in model.parameters_mut().into_iter().zip(&stats.grads).zip(v.iter_mut()) {
                    v.zip_apply(g, |v, d| *v = momentum * *v + d);
                    p.zip_apply(v, |w, d| *w -= config.lr * d);
                }
            }
        }
        log.task_loss.push(stats.task_loss);
        log.balance_loss.push(stats.balance_loss);
        log.expert_load.push(stats.load);
        log.grad_norm.push(norm);

        let done = step + 1;
        if done == config.steps || (config.eval_every > 0 && done % config.eval_every == 0) {
            let point = eval_point(model, &eval_set, done)?;
            if !point.loss.is_finite() {
                return Err(Error::TrainingDiverged { step });
            }
            log.eval.push(point);
        }
    }
    log.final_eval = log.eval.last().map(|p| p.loss).unwrap_or(f64::NAN);
    Ok(log)
}

/// Adapter families compared by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterMethod {
    /// One undamped principal-segment adapter of the full rank.
    SingleLora,
    ZeroInitMoe,
    SpectralMoe,
}

impl AdapterMethod {
    pub const ALL: [AdapterMethod; 3] = [
        AdapterMethod::SingleLora,
        AdapterMethod::ZeroInitMoe,
        AdapterMethod::SpectralMoe,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AdapterMethod::SingleLora => "single-lora",
            AdapterMethod::ZeroInitMoe => "zero-init-moe",
            AdapterMethod::SpectralMoe => "spectral-moe",
        }
    }

    /// Layer configuration derived from the MoE template.
    pub fn layer_config(&self, template: &LayerConfig) -> LayerConfig {
        match self {
            AdapterMethod::SingleLora => {
                LayerConfig::single_lora(template.m, template.n, template.total_rank).with_scale(template.scale)
            }
            AdapterMethod::ZeroInitMoe => template.clone().with_init(AdapterInit::Zero),
            AdapterMethod::SpectralMoe => template.clone().with_init(AdapterInit::Spectral),
        }
    }

    pub fn build(&self, w0: &Matrix, template: &LayerConfig, seed: u64) -> Result<SpectralMoeLayer> {
        layer::init_layer(w0, &self.layer_config(template), seed)
    }
}

impl std::fmt::Display for AdapterMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Loss retention `1 − L/L_ref` of one task at one point in the sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionRow {
    /// Index of the training phase just completed.
    pub phase: usize,
    pub task: usize,
    pub loss: f64,
    pub reference_loss: f64,
    pub retention: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub method: AdapterMethod,
    pub rows: Vec<RetentionRow>,
    /// Per earlier task: `(r_own − r_final) / r_own`, where `r_own` is the
    /// retention right after training on that task.
    pub degradation: Vec<f64>,
}

impl RetentionReport {
    pub fn mean_degradation(&self) -> f64 {
        if self.degradation.is_empty() {
            return 0.0;
        }
        self.degradation.iter().sum::<f64>() / self.degradation.len() as f64
    }
}

/// Trains one adapter on the tasks in order, re-evaluating every task after
/// each phase. The reference loss of a task is that of the pretrained weight.
pub fn forgetting_experiment(
    method: AdapterMethod,
    pretrained: &Matrix,
    tasks: &[TeacherTask],
    template: &LayerConfig,
    config: &TrainConfig,
) -> Result<RetentionReport> {
    if tasks.len() < 2 {
        return Err(Error::invalid("forgetting needs at least two tasks"));
    }
    let mut model = method.build(pretrained, template, config.seed)?;
    let reference = FullFtModel::new(pretrained.clone());
    let eval_sets: Vec<Batch> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| t.eval_set(config.eval_samples, eval_seed(config.seed.wrapping_add(i as u64))))
        .collect();
    let refs = eval_sets.iter().map(|b| evaluate(&reference, b)).collect::<Result<Vec<_>>>()?;
    if refs.iter().any(|&r| r.is_nan() || r <= 0.0) {
        return Err(Error::invalid("a task is already solved by the pretrained weight"));
    }

    let mut rows = Vec::new();
    let mut own = vec![f64::NAN; tasks.len()];
    for (phase, task) in tasks.iter().enumerate() {
        let mut cfg = config.clone();
        cfg.seed = config.seed.wrapping_add(1000 * (phase as u64 + 1));
        train(&mut model, task, &cfg)?;
        for (i, (set, &reference_loss)) in eval_sets.iter().zip(&refs).enumerate().take(phase + 1) {
            let loss = evaluate(&model, set)?;
            let retention = 1.0 - loss / reference_loss;
            if i == phase {
                own[i] = retention;
            }
            rows.push(RetentionRow {
                phase,
                task: i,
                loss,
                reference_loss,
                retention,
            });
        }
    }
    let last = tasks.len() - 1;
    let degradation = (0..last)
        .map(|i| {
            let fin = rows
                .iter()
                .find(|r| r.phase == last && r.task == i)
                .map(|r| r.retention)
                .expect("final phase evaluates every task");
            (own[i] - fin) / own[i]
        })
        .collect();
    Ok(RetentionReport {
        method,
        rows,
        degradation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub n_experts: usize,
    pub top_k: usize,
    pub seed: u64,
    pub outcome: SweepOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SweepOutcome {
    Completed {
        final_loss: f64,
        trainable_params: usize,
        min_load: Option<f64>,
    },
    Skipped {
        reason: String,
    },
}

/// Trains one spectral MoE per `(N, k)` cell at fixed total rank. Cell `i`
/// uses seed `config.seed + i`; results keep grid order regardless of `jobs`.
pub fn expert_sweep<W: Workload + ?Sized>(
    cells: &[(usize, usize)],
    total_rank: usize,
    pretrained: &Matrix,
    task: &W,
    template: &LayerConfig,
    config: &TrainConfig,
    jobs: usize,
) -> Result<Vec<SweepCell>> {
    config.validate()?;
    let run = |(idx, &(n_experts, top_k)): (usize, &(usize, usize))| -> Result<SweepCell> {
        let seed = config.seed.wrapping_add(idx as u64);
        let mut cfg_layer = template.clone();
        cfg_layer.total_rank = total_rank;
        cfg_layer.n_experts = n_experts;
        cfg_layer.top_k = top_k;
        let outcome = match cfg_layer.validate() {
            Err(e) => SweepOutcome::Skipped { reason: e.to_string() },
            Ok(()) => match layer::init_layer(pretrained, &cfg_layer, seed) {
                Err(e @ (Error::InvalidInput(_) | Error::InsufficientRank { .. })) => {
                    SweepOutcome::Skipped { reason: e.to_string() }
                }
                Err(e) => return Err(e),
                Ok(mut model) => {
                    let mut cfg = config.clone();
                    cfg.seed = seed;
                    let log = train(&mut model, task, &cfg)?;
                    SweepOutcome::Completed {
                        final_loss: log.final_eval,
                        trainable_params: model.trainable_parameter_count(),
                        min_load: log.min_load(),
                    }
                }
            },
        };
        Ok(SweepCell {
            n_experts,
            top_k,
            seed,
            outcome,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    pool.install(|| cells.par_iter().enumerate().map(run).collect())
}

/// The synthetic comparison benchmark: a pretrained weight with a decaying
/// spectrum, domains that each amplify one band of it, and a 2-of-8 layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub suite: SuiteSpec,
    /// Domains mixed in the convergence comparison.
    pub domains: usize,
    /// MoE template; the single adapter uses its total rank and scale.
    pub layer: LayerConfig,
    /// Shared by every method; the seed is replaced per run.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            suite: SuiteSpec::new(32, 32),
            domains: 4,
            layer: LayerConfig::new(32, 32, 16, 8, 2),
            train: TrainConfig::new(0.5, 1000, 0),
            seeds: (0..5).collect(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        self.layer.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::invalid("benchmark needs at least one seed"));
        }
        if (self.suite.m, self.suite.n) != (self.layer.m, self.layer.n) {
            return Err(Error::invalid("suite and layer shapes differ"));
        }
        Ok(())
    }
}

/// One method trained on the domain mixture of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRun {
    pub seed: u64,
    pub method: AdapterMethod,
    /// Evaluation loss of the pretrained weight.
    pub reference_loss: f64,
    pub log: TrainLog,
}

impl ConvergenceRun {
    /// Final evaluation loss over the pretrained weight's loss.
    pub fn relative_final_loss(&self) -> f64 {
        self.log.final_eval / self.reference_loss
    }
}

/// Trains every method on the domain mixture for each seed. Seed `s` builds
/// the suite, initializes the layer, and drives the data stream.
pub fn convergence_runs(bench: &BenchmarkConfig) -> Result<Vec<ConvergenceRun>> {
    bench.validate()?;
    let per_seed = bench
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<ConvergenceRun>> {
            let suite = make_task_suite(&bench.suite, bench.domains, seed)?;
            let mix = suite.mixture()?;
            let mut cfg = bench.train.clone();
            cfg.seed = seed;
            let eval_set = mix.eval_set(cfg.eval_samples, eval_seed(seed));
            let reference_loss = evaluate(&FullFtModel::new(suite.pretrained.clone()), &eval_set)?;
            AdapterMethod::ALL
                .iter()
                .map(|&method| {
                    let mut model = method.build(&suite.pretrained, &bench.layer, seed)?;
                    let log = train(&mut model, &mix, &cfg)?;
                    Ok(ConvergenceRun {
                        seed,
                        method,
                        reference_loss,
                        log,
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// One method trained on a two-task sequence of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRun {
    pub seed: u64,
    /// Every expert active (`k = N`).
    pub dense_routing: bool,
    pub report: RetentionReport,
}

impl ForgettingRun {
    pub fn label(&self) -> String {
        if self.dense_routing {
            format!("{}-dense", self.report.method)
        } else {
            self.report.method.to_string()
        }
    }
}

/// Sequential two-task runs for every method, plus the spectral MoE with
/// dense routing when `dense_ablation` is set.
pub fn forgetting_runs(bench: &BenchmarkConfig, dense_ablation: bool) -> Result<Vec<ForgettingRun>> {
    bench.validate()?;
    let mut dense = bench.layer.clone();
    dense.top_k = dense.n_experts;
    let per_seed = bench
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<ForgettingRun>> {
            let pair = make_task_suite(&bench.suite, 2, seed)?;
            let mut cfg = bench.train.clone();
            cfg.seed = seed;
            let mut variants: Vec<(AdapterMethod, bool)> = AdapterMethod::ALL.iter().map(|&m| (m, false)).collect();
            if dense_ablation {
                variants.push((AdapterMethod::SpectralMoe, true));
            }
            variants
                .into_iter()
                .map(|(method, dense_routing)| {
                    let template = if dense_routing { &dense } else { &bench.layer };
                    let report = forgetting_experiment(method, &pair.pretrained, &pair.tasks, template, &cfg)?;
                    Ok(ForgettingRun {
                        seed,
                        dense_routing,
                        report,
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Median relative final loss per method.
pub fn median_loss(runs: &[ConvergenceRun], method: AdapterMethod) -> f64 {
    let v: Vec<f64> = runs.iter().filter(|r| r.method == method).map(|r| r.relative_final_loss()).collect();
    median(&v)
}

/// Median mean degradation per variant label.
pub fn median_degradation(runs: &[ForgettingRun], label: &str) -> f64 {
    let v: Vec<f64> = runs.iter().filter(|r| r.label() == label).map(|r| r.report.mean_degradation()).collect();
    median(&v)
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}
