//! Trainable-parameter and forward-FLOP accounting for full-size backbones,
//! plus an empirical counter over constructed linear stacks.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{init_layer, AdapterInit, LayerConfig, SpectralMoeLayer};
use crate::linalg::gaussian_matrix;
use crate::oracles::{FullFtModel, UpcycledMoeModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchFamily {
    /// Decoder with grouped-query attention and a SwiGLU MLP.
    Decoder,
    /// ViT encoder with q, k, v, o, fc1 and fc2 projections.
    VitClip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchPreset {
    pub name: String,
    pub family: ArchFamily,
    pub hidden: usize,
    pub layers: usize,
    pub rank: usize,
    pub experts: usize,
    pub top_k: usize,
    #[serde(default)]
    pub vocab: Option<usize>,
    #[serde(default)]
    pub patch: Option<usize>,
    #[serde(default)]
    pub channels: Option<usize>,
    /// Input embedding and LM head share one matrix.
    #[serde(default)]
    pub tied_embedding: bool,
}

impl ArchPreset {
    pub fn vit_clip() -> Self {
        ArchPreset {
            name: "vit-clip".into(),
            family: ArchFamily::VitClip,
            hidden: 768,
            layers: 12,
            rank: 8,
            experts: 8,
            top_k: 2,
            vocab: None,
            patch: Some(32),
            channels: Some(3),
            tied_embedding: false,
        }
    }

    pub fn decoder_7b() -> Self {
        ArchPreset {
            name: "decoder-7b".into(),
            family: ArchFamily::Decoder,
            hidden: 4096,
            layers: 28,
            rank: 32,
            experts: 2,
            top_k: 2,
            vocab: Some(151_646),
            patch: None,
            channels: None,
            tied_embedding: true,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "vit-clip" => Ok(Self::vit_clip()),
            "decoder-7b" => Ok(Self::decoder_7b()),
            other => Err(Error::invalid(format!("unknown preset '{other}' (expected vit-clip or decoder-7b)"))),
        }
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self
    }

    pub fn with_experts(mut self, experts: usize) -> Self {
        self.experts = experts;
        self
    }

    pub fn with_top_k(mut self, top_k: usize) -> Self {
        self.top_k = top_k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.hidden, self.layers, self.rank, self.experts, self.top_k];
        let optional = [self.vocab, self.patch, self.channels];
        if positive.contains(&0) || optional.contains(&Some(0)) {
            return Err(Error::invalid(format!("preset '{}' has a zero dimension", self.name)));
        }
        if self.top_k > self.experts {
            return Err(Error::invalid(format!("top_k {} exceeds experts {}", self.top_k, self.experts)));
        }
        Ok(())
    }

    /// Width of one expert when the total rank is split evenly.
    pub fn expert_width(&self) -> f64 {
        self.rank as f64 / self.experts as f64
    }

    fn vocab(&self) -> Result<f64> {
        self.vocab
            .map(|v| v as f64)
            .ok_or_else(|| Error::invalid(format!("preset '{}' needs a vocabulary size", self.name)))
    }

    fn patch_and_channels(&self) -> Result<(f64, f64)> {
        match (self.patch, self.channels) {
            (Some(p), Some(c)) => Ok((p as f64, c as f64)),
            _ => Err(Error::invalid(format!("preset '{}' needs patch and channel sizes", self.name))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    FullFt,
    FullFtMoe,
    Lora,
    MoeLora,
    HydraLora,
    Adamole,
    Dora,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::FullFt,
        Method::FullFtMoe,
        Method::Lora,
        Method::MoeLora,
        Method::HydraLora,
        Method::Adamole,
        Method::Dora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FullFt => "full-ft",
            Method::FullFtMoe => "full-ft-moe",
            Method::Lora => "lora",
            Method::MoeLora => "moe-lora",
            Method::HydraLora => "hydra-lora",
            Method::Adamole => "adamole",
            Method::Dora => "dora",
        }
    }

    pub fn has_flops_formula(self) -> bool {
        matches!(self, Method::FullFtMoe | Method::MoeLora)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamCount {
    /// May be fractional for formulas with rounded coefficients.
    pub trainable: f64,
    /// Percentage of the full fine-tuning count.
    pub proportion: f64,
}

impl ParamCount {
    /// Proportion as printed in tables, two decimals.
    pub fn proportion_display(&self) -> String {
        format!("{:.2}", self.proportion)
    }

    /// The count as an integer when it is one.
    pub fn exact(&self) -> Option<u64> {
        (self.trainable.fract() == 0.0 && self.trainable >= 0.0).then_some(self.trainable as u64)
    }
}

fn full_ft_count(p: &ArchPreset) -> Result<f64> {
    let (h, l) = (p.hidden as f64, p.layers as f64);
    match p.family {
        ArchFamily::Decoder => {
            let embeddings = if p.tied_embedding { 1.0 } else { 2.0 } * h * p.vocab()?;
            Ok((10.25 * h * h + 2.0 * h) * l + h + embeddings)
        }
        ArchFamily::VitClip => {
            let (patch, c) = p.patch_and_channels()?;
            Ok((c + 1.0) * h * patch * patch + (12.0 * h * h + 2.0 * h) * l + h * h + 3.0 * h + patch * h)
        }
    }
}

fn method_count(p: &ArchPreset, method: Method) -> Result<f64> {
    let (h, l, r, e) = (p.hidden as f64, p.layers as f64, p.rank as f64, p.experts as f64);
    let count = match (p.family, method) {
        (_, Method::FullFt) => full_ft_count(p)?,
        (ArchFamily::Decoder, Method::Lora) => 11.58 * h * l * r,
        (ArchFamily::Decoder, Method::Dora) => (11.58 * h * r + 5.0) * l,
        (ArchFamily::Decoder, Method::HydraLora) => (4.91 * h * r + 6.66 * h * r / e + 6.66 * h * e) * l,
        (ArchFamily::Decoder, Method::Adamole) => (11.58 * h * r + 6.66 * h * e + 6.66 * h) * l,
        (ArchFamily::Decoder, Method::MoeLora) => (11.58 * h * r + 6.66 * h * e) * l,
        (ArchFamily::Decoder, Method::FullFtMoe) => {
            return Err(Error::invalid("full-ft-moe has no parameter formula for the decoder family"))
        }
        (ArchFamily::VitClip, Method::FullFtMoe) => {
            let (patch, c) = p.patch_and_channels()?;
            (c + 1.0) * patch * patch * h
                + (12.0 * e * h * h + 2.0 * h + 9.0 * h * e) * l
                + 3.0 * h
                + patch * h
                + h * h
        }
        (ArchFamily::VitClip, Method::Lora) => 18.0 * h * l * r,
        (ArchFamily::VitClip, Method::HydraLora) => (9.0 * h * r + 9.0 * h * e + 9.0 * h * r / e) * l,
        (ArchFamily::VitClip, Method::Adamole) => (18.0 * h * r + 9.0 * h * e + 9.0 * h) * l,
        (ArchFamily::VitClip, Method::MoeLora) => (18.0 * h * r + 9.0 * h * e) * l,
        (ArchFamily::VitClip, Method::Dora) => {
            return Err(Error::invalid("dora has no parameter formula for the vit family"))
        }
    };
    Ok(count)
}

/// Closed-form trainable count and its share of full fine-tuning.
pub fn closed_form_params(preset: &ArchPreset, method: Method) -> Result<ParamCount> {
    preset.validate()?;
    let trainable = method_count(preset, method)?;
    let proportion = 100.0 * trainable / full_ft_count(preset)?;
    Ok(ParamCount { trainable, proportion })
}

/// Forward FLOPs split by term. Every field already includes its batch factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopsBreakdown {
    /// Router projections, `BL·52/3·esH`.
    pub routing: f64,
    /// Dense projections, `BL·41/2·sH²` times `k` for full-rank experts.
    pub dense: f64,
    /// Attention products, `BL·4s²H`.
    pub attention: f64,
    /// Low-rank expert paths, `BL·69/2·ksHd`; zero for full-rank experts.
    pub adapter: f64,
    /// Vocabulary projection, `2BsHV`.
    pub vocab: f64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> f64 {
        self.routing + self.dense + self.attention + self.adapter + self.vocab
    }
}

/// Forward FLOPs of an upcycled decoder. `d` is the expert width `r/e`.
pub fn flops_forward(preset: &ArchPreset, method: Method, batch: usize, seq: usize) -> Result<FlopsBreakdown> {
    preset.validate()?;
    if preset.family != ArchFamily::Decoder {
        return Err(Error::invalid("FLOPs formulas are defined for the decoder family only"));
    }
    let (h, l, e, k) = (preset.hidden as f64, preset.layers as f64, preset.experts as f64, preset.top_k as f64);
    let (b, s, v) = (batch as f64, seq as f64, preset.vocab()?);
    let d = preset.expert_width();
    let bl = b * l;
    let common = |dense_k: f64, adapter: f64| FlopsBreakdown {
        routing: bl * 52.0 / 3.0 * e * s * h,
        dense: bl * 41.0 / 2.0 * dense_k * s * h * h,
        attention: bl * 4.0 * s * s * h,
        adapter,
        vocab: 2.0 * b * s * h * v,
    };
    match method {
        Method::FullFtMoe => Ok(common(k, 0.0)),
        Method::MoeLora => Ok(common(1.0, bl * 69.0 / 2.0 * k * s * h * d)),
        other => Err(Error::invalid(format!("no FLOPs formula for {other}"))),
    }
}

/// One projection of a constructed stack.
#[derive(Debug, Clone)]
pub enum StackLinear {
    Frozen { m: usize, n: usize },
    Full(FullFtModel),
    Upcycled(UpcycledMoeModel),
    Adapter(Box<SpectralMoeLayer>),
}

impl StackLinear {
    pub fn trainable_parameter_count(&self) -> usize {
        match self {
            StackLinear::Frozen { .. } => 0,
            StackLinear::Full(model) => model.w.len(),
            StackLinear::Upcycled(model) => model.trainable_parameter_count(),
            StackLinear::Adapter(layer) => layer.trainable_parameter_count(),
        }
    }
}

/// A non-projection tensor such as an embedding or a norm.
#[derive(Debug, Clone, PartialEq)]
pub struct StackTensor {
    pub name: String,
    pub shape: (usize, usize),
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct LinearStack {
    pub layers: Vec<Vec<StackLinear>>,
    pub tensors: Vec<StackTensor>,
}

/// Sums element counts over every trainable tensor.
pub fn empirical_params(stack: &LinearStack) -> u64 {
    let linear: usize = stack.layers.iter().flatten().map(StackLinear::trainable_parameter_count).sum();
    let other: usize = stack
        .tensors
        .iter()
        .filter(|t| t.trainable)
        .map(|t| t.shape.0 * t.shape.1)
        .sum();
    (linear + other) as u64
}

/// Builds the ViT linear stack for `method` with real adapters and experts.
/// Only full-ft, full-ft-moe, lora and moe-lora are constructible.
pub fn build_vit_stack(preset: &ArchPreset, method: Method, seed: u64) -> Result<LinearStack> {
    preset.validate()?;
    if preset.family != ArchFamily::VitClip {
        return Err(Error::invalid("only the vit family has a constructible stack"));
    }
    if !matches!(method, Method::FullFt | Method::FullFtMoe | Method::Lora | Method::MoeLora) {
        return Err(Error::invalid(format!("{method} is not constructible")));
    }
    let (patch, channels) = match (preset.patch, preset.channels) {
        (Some(p), Some(c)) => (p, c),
        _ => return Err(Error::invalid("vit stack needs patch and channel sizes")),
    };
    let h = preset.hidden;
    let shapes = [(h, h), (h, h), (h, h), (h, h), (4 * h, h), (h, 4 * h)];
    let dense_trainable = matches!(method, Method::FullFt | Method::FullFtMoe);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut layers = Vec::with_capacity(preset.layers);
    let mut tensors = Vec::new();
    for layer in 0..preset.layers {
        let mut projections = Vec::with_capacity(shapes.len());
        for &(m, n) in &shapes {
            let w0 = gaussian_matrix(m, n, 1.0 / (n as f64).sqrt(), &mut rng);
            let layer_seed = rng.next_u64();
            let linear = match method {
                Method::FullFt => StackLinear::Full(FullFtModel::new(w0)),
                Method::FullFtMoe => {
                    let cfg = LayerConfig::new(m, n, preset.experts, preset.experts, preset.top_k)
                        .with_init(AdapterInit::Zero);
                    StackLinear::Upcycled(UpcycledMoeModel::from_layer(&init_layer(&w0, &cfg, layer_seed)?)?)
                }
                Method::Lora => {
                    StackLinear::Adapter(Box::new(init_layer(&w0, &LayerConfig::single_lora(m, n, preset.rank), layer_seed)?))
                }
                _ => {
                    let cfg = LayerConfig::new(m, n, preset.rank, preset.experts, preset.top_k);
                    StackLinear::Adapter(Box::new(init_layer(&w0, &cfg, layer_seed)?))
                }
            };
            projections.push(linear);
        }
        layers.push(projections);
        for norm in ["attn_norm", "mlp_norm"] {
            tensors.push(StackTensor { name: format!("layer{layer}.{norm}"), shape: (1, h), trainable: dense_trainable });
        }
    }
    let extras = [
        ("patch_embedding", ((channels + 1) * patch * patch, h)),
        ("position_embedding", (patch, h)),
        ("class_token", (1, h)),
        ("final_norm", (2, h)),
        ("pooler", (h, h)),
    ];
    for (name, shape) in extras {
        tensors.push(StackTensor { name: name.into(), shape, trainable: dense_trainable });
    }
    Ok(LinearStack { layers, tensors })
}
