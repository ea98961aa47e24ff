//! Brute-force references: full fine-tuning, an upcycled full-rank MoE, and
//! central finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{LayerGradients, SpectralMoeLayer};
use crate::linalg::{self, Matrix, Vector};
use crate::routing::{self, GateConfig, GateOutput, RouterState};
use crate::training::Workload;

/// Squared error is `½‖y − t‖²`; cross-entropy is `−Σ tᵢ log softmax(y)ᵢ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SquaredError,
    SoftmaxCrossEntropy,
}

/// Loss value and `∂L/∂y`.
pub fn loss_and_grad(kind: LossKind, y: &Vector, target: &Vector) -> Result<(f64, Vector)> {
    linalg::ensure_len(target, y.len(), "target")?;
    match kind {
        LossKind::SquaredError => {
            let r = y - target;
            Ok((0.5 * r.norm_squared(), r))
        }
        LossKind::SoftmaxCrossEntropy => {
            let p = routing::softmax(y);
            let max = y.max();
            let log_z = max + y.map(|v| (v - max).exp()).sum().ln();
            let loss = -target.iter().zip(y.iter()).map(|(t, v)| t * (v - log_z)).sum::<f64>();
            let mass = target.sum();
            Ok((loss, p * mass - target))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullFtModel {
    pub w: Matrix,
}

impl FullFtModel {
    pub fn new(w: Matrix) -> Self {
        FullFtModel { w }
    }

    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        linalg::ensure_len(x, self.w.ncols(), "input")?;
        Ok(&self.w * x)
    }
}

/// Exact `∂L/∂W` for `y = W·x`.
pub fn full_ft_gradient(model: &FullFtModel, x: &Vector, target: &Vector, kind: LossKind) -> Result<Matrix> {
    let y = model.forward(x)?;
    let (_, dy) = loss_and_grad(kind, &y, target)?;
    Ok(dy * x.transpose())
}

/// Full-rank MoE whose experts all start as copies of the pretrained weight.
#[derive(Debug, Clone, PartialEq)]
pub struct UpcycledMoeModel {
    pub experts: Vec<Matrix>,
    pub router: RouterState,
    pub gate: GateConfig,
    pub router_frozen: bool,
}

impl UpcycledMoeModel {
    pub fn new(w0: &Matrix, router: RouterState, gate: GateConfig) -> Result<Self> {
        gate.validate()?;
        if router.n_experts() != gate.n_experts || router.input_dim() != w0.ncols() {
            return Err(Error::invalid("router shape does not match the weight and gate"));
        }
        Ok(UpcycledMoeModel {
            experts: vec![w0.clone(); gate.n_experts],
            router,
            gate,
            router_frozen: false,
        })
    }

    /// Upcycled counterpart of a LoRA-MoE layer: same pretrained weight, same
    /// router, same gate.
    pub fn from_layer(layer: &SpectralMoeLayer) -> Result<Self> {
        Self::new(&layer.pretrained_weight(), layer.router.clone(), layer.gate)
    }

    pub fn forward(&self, x: &Vector) -> Result<(Vector, GateOutput)> {
        let gate = routing::topk_gate(&self.router, x, &self.gate)?;
        let mut y = Vector::zeros(self.experts[0].nrows());
        for &i in &gate.selected {
            y.gemv(gate.weights[i], &self.experts[i], x, 1.0);
        }
        Ok((y, gate))
    }

    pub fn trainable_parameter_count(&self) -> usize {
        let experts: usize = self.experts.iter().map(|w| w.len()).sum();
        experts + if self.router_frozen { 0 } else { self.router.w_z.len() }
    }
}

#[derive(Debug, Clone)]
pub struct UpcycledStep {
    pub output: Vector,
    pub loss: f64,
    pub gate: GateOutput,
    /// One per expert; unselected experts carry exact zeros.
    pub expert_grads: Vec<Matrix>,
    pub router_grad: Matrix,
}

pub fn upcycled_forward_backward(
    model: &UpcycledMoeModel,
    x: &Vector,
    target: &Vector,
    kind: LossKind,
) -> Result<UpcycledStep> {
    let (output, gate) = model.forward(x)?;
    let (loss, dy) = loss_and_grad(kind, &output, target)?;
    let n = model.experts.len();
    let (rows, cols) = model.experts[0].shape();
    let mut expert_grads = vec![Matrix::zeros(rows, cols); n];
    let mut d_weight = Vector::zeros(n);
    for &i in &gate.selected {
        expert_grads[i].ger(gate.weights[i], &dy, x, 0.0);
        d_weight[i] = dy.dot(&(&model.experts[i] * x));
    }
    let mean: f64 = gate.selected.iter().map(|&i| gate.weights[i] * d_weight[i]).sum();
    let mut d_logits = Vector::zeros(n);
    if n > 1 {
        for &j in &gate.selected {
            d_logits[j] = gate.weights[j] * (d_weight[j] - mean);
        }
    }
    let router_grad = x * d_logits.transpose();
    Ok(UpcycledStep {
        output,
        loss,
        gate,
        expert_grads,
        router_grad,
    })
}

/// Central differences `(f(θ+εE) − f(θ−εE)) / 2ε`, entry by entry.
pub fn finite_diff_gradient<F>(mut f: F, theta: &Matrix, step: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = theta.clone();
    let mut grad = Matrix::zeros(theta.nrows(), theta.ncols());
    for idx in 0..theta.len() {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let plus = f(&probe);
        probe[idx] = orig - step;
        let minus = f(&probe);
        probe[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "objective is not finite around entry {idx}"
            )));
        }
        grad[idx] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Agreement between a layer's analytic backward pass and central finite
/// differences of `½‖y − t‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    /// Largest per-tensor `‖analytic − numeric‖ / ‖numeric‖` over selected
    /// experts' factors and the router.
    pub max_rel_error: f64,
    /// Largest absolute analytic gradient entry of an unselected expert.
    pub unselected_max_abs: f64,
}

fn tensor_rel_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let scale = numeric.norm().max(analytic.norm());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).norm() / scale
    }
}

pub fn layer_gradient_check(layer: &SpectralMoeLayer, x: &Vector, target: &Vector, step: f64) -> Result<GradientCheck> {
    let (y, gate) = layer.forward(x)?;
    let grads = layer.backward(x, &(&y - target), false)?;
    let loss_of = |l: &SpectralMoeLayer| -> f64 {
        match l.forward(x) {
            Ok((y, _)) => 0.5 * (y - target).norm_squared(),
            Err(_) => f64::NAN,
        }
    };

    let mut max_rel_error: f64 = 0.0;
    let mut unselected_max_abs: f64 = 0.0;
    let mut probe = layer.clone();
    for i in 0..layer.n_experts() {
        let g = &grads.experts[i];
        if !gate.is_selected(i) {
            unselected_max_abs = unselected_max_abs.max(g.b.amax()).max(g.a.amax());
            continue;
        }
        let fd_b = finite_diff_gradient(
            |b| {
                probe.experts[i].b.copy_from(b);
                loss_of(&probe)
            },
            &layer.experts[i].b,
            step,
        )?;
        probe.experts[i].b.copy_from(&layer.experts[i].b);
        let fd_a = finite_diff_gradient(
            |a| {
                probe.experts[i].a.copy_from(a);
                loss_of(&probe)
            },
            &layer.experts[i].a,
            step,
        )?;
        probe.experts[i].a.copy_from(&layer.experts[i].a);
        max_rel_error = max_rel_error.max(tensor_rel_error(&g.b, &fd_b)).max(tensor_rel_error(&g.a, &fd_a));
    }
    if layer.n_experts() > 1 {
        let fd_router = finite_diff_gradient(
            |w| {
                probe.router.w_z.copy_from(w);
                loss_of(&probe)
            },
            &layer.router.w_z,
            step,
        )?;
        max_rel_error = max_rel_error.max(tensor_rel_error(&grads.router, &fd_router));
    }
    Ok(GradientCheck { max_rel_error, unselected_max_abs })
}

/// Per-step, per-expert `‖W̃ᵢ − Wᵢ‖_F` between a LoRA-MoE layer and its
/// upcycled full-rank reference; row 0 is before any update.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTrace {
    pub divergence: Vec<Vec<f64>>,
}

impl AlignmentTrace {
    /// Mean over experts of the last recorded divergence.
    pub fn final_mean(&self) -> f64 {
        let last = self.divergence.last().expect("trace has at least the initial row");
        last.iter().sum::<f64>() / last.len() as f64
    }
}

/// Trains both models with plain SGD on the identical batch stream, routers
/// frozen, and records the divergence of each expert's equivalent weight.
#[allow(clippy::too_many_arguments)]
pub fn alignment_trace<W: Workload + ?Sized>(
    lora: &SpectralMoeLayer,
    ft: &UpcycledMoeModel,
    task: &W,
    steps: usize,
    batch_size: usize,
    lr_lora: f64,
    lr_ft: f64,
    seed: u64,
) -> Result<AlignmentTrace> {
    if lora.n_experts() != ft.experts.len() || lora.router != ft.router || lora.gate.top_k != ft.gate.top_k {
        return Err(Error::invalid("LoRA and full-rank models must share experts count, router and gate"));
    }
    if lora.base.shape() != ft.experts[0].shape() || task.input_dim() != lora.config.n {
        return Err(Error::invalid("model and task shapes differ"));
    }
    if batch_size == 0 || lr_lora < 0.0 || lr_ft < 0.0 {
        return Err(Error::invalid("batch size must be positive and learning rates non-negative"));
    }
    let mut lora = lora.clone();
    let mut ft = ft.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let snapshot = |lora: &SpectralMoeLayer, ft: &UpcycledMoeModel| -> Vec<f64> {
        (0..ft.experts.len())
            .map(|i| (lora.expert_equivalent_weight(i) - &ft.experts[i]).norm())
            .collect()
    };
    let mut divergence = vec![snapshot(&lora, &ft)];

    for step in 1..=steps {
        let batch = task.sample_batch(&mut rng, batch_size);
        let inv = 1.0 / batch_size as f64;

        let mut lg = LayerGradients::zeros_like(&lora);
        let mut fg: Vec<Matrix> = ft.experts.iter().map(|w| Matrix::zeros(w.nrows(), w.ncols())).collect();
        for (x, t) in batch.inputs.iter().zip(&batch.targets) {
            let (y, gate) = lora.forward(x)?;
            lora.accumulate_gradients(x, &gate, &((y - t) * inv), None, &mut lg);

            let step = upcycled_forward_backward(&ft, x, t, LossKind::SquaredError)?;
            for (acc, g) in fg.iter_mut().zip(&step.expert_grads) {
                *acc += g * inv;
            }
        }
        for (e, g) in lora.experts.iter_mut().zip(&lg.experts) {
            e.b -= &g.b * lr_lora;
            e.a -= &g.a * lr_lora;
        }
        for (w, g) in ft.experts.iter_mut().zip(&fg) {
            *w -= g * lr_ft;
        }
        let current = snapshot(&lora, &ft);
        if current.iter().any(|d| !d.is_finite()) {
            return Err(Error::TrainingDiverged { step });
        }
        divergence.push(current);
    }
    Ok(AlignmentTrace { divergence })
}
