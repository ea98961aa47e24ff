//! Versioned JSON container for a [`SpectralMoeLayer`].
//!
//! Doubles are written with shortest round-trip formatting, so a save/load
//! cycle reproduces every finite payload bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{LayerConfig, SpectralMoeLayer};
use crate::linalg::{ensure_finite, Matrix};
use crate::routing::{GateConfig, RouterState};
use crate::spectral::ExpertAdapter;

pub const CHECKPOINT_FORMAT: &str = "spectral-moe-layer";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerCheckpoint {
    format: String,
    version: u32,
    config: LayerConfig,
    gate: GateConfig,
    scale: f64,
    base: Matrix,
    residual: Matrix,
    experts: Vec<ExpertAdapter>,
    router: RouterState,
    router_frozen: bool,
}

pub fn to_json(layer: &SpectralMoeLayer) -> Result<String> {
    ensure_finite(&layer.base, "base")?;
    ensure_finite(&layer.residual, "residual")?;
    ensure_finite(&layer.router.w_z, "router")?;
    for e in &layer.experts {
        ensure_finite(&e.b, "expert B")?;
        ensure_finite(&e.a, "expert A")?;
    }
    let ckpt = LayerCheckpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: layer.config.clone(),
        gate: layer.gate,
        scale: layer.scale,
        base: layer.base.clone(),
        residual: layer.residual.clone(),
        experts: layer.experts.clone(),
        router: layer.router.clone(),
        router_frozen: layer.router_frozen,
    };
    serde_json::to_string(&ckpt).map_err(|e| Error::Schema(format!("checkpoint encoding failed: {e}")))
}

pub fn from_json(text: &str) -> Result<SpectralMoeLayer> {
    let ckpt: LayerCheckpoint =
        serde_json::from_str(text).map_err(|e| Error::Schema(format!("malformed checkpoint: {e}")))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::Schema(format!("unexpected checkpoint format '{}'", ckpt.format)));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Schema(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    ckpt.config.validate()?;
    let (m, n) = (ckpt.config.m, ckpt.config.n);
    let d = ckpt.config.expert_width();
    let shapes_ok = ckpt.base.shape() == (m, n)
        && ckpt.residual.shape() == (m, n)
        && ckpt.experts.len() == ckpt.config.n_experts
        && ckpt.experts.iter().all(|e| e.b.shape() == (m, d) && e.a.shape() == (d, n))
        && ckpt.router.input_dim() == n
        && ckpt.router.n_experts() == ckpt.config.n_experts
        && ckpt.gate == ckpt.config.gate_config()?;
    if !shapes_ok {
        return Err(Error::Schema("checkpoint tensors do not match its config".into()));
    }
    Ok(SpectralMoeLayer {
        config: ckpt.config,
        gate: ckpt.gate,
        scale: ckpt.scale,
        base: ckpt.base,
        residual: ckpt.residual,
        experts: ckpt.experts,
        router: ckpt.router,
        router_frozen: ckpt.router_frozen,
    })
}

pub fn save(layer: &SpectralMoeLayer, path: &Path) -> Result<()> {
    let text = to_json(layer)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SpectralMoeLayer> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{init_layer, LayerConfig};
    use crate::linalg::gaussian_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer() -> SpectralMoeLayer {
        let w0 = gaussian_matrix(6, 8, 0.7, &mut ChaCha8Rng::seed_from_u64(4));
        init_layer(&w0, &LayerConfig::new(6, 8, 4, 2, 1), 4).unwrap()
    }

    fn bits(m: &Matrix) -> Vec<u64> {
        m.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut original = layer();
        original.experts[0].b[(0, 0)] = -0.0;
        original.experts[1].a[(1, 2)] = f64::MIN_POSITIVE / 3.0;
        let restored = from_json(&to_json(&original).unwrap()).unwrap();
        assert_eq!(bits(&restored.base), bits(&original.base));
        assert_eq!(bits(&restored.residual), bits(&original.residual));
        assert_eq!(bits(&restored.router.w_z), bits(&original.router.w_z));
        for (a, b) in restored.experts.iter().zip(&original.experts) {
            assert_eq!(bits(&a.b), bits(&b.b));
            assert_eq!(bits(&a.a), bits(&b.a));
        }
        assert_eq!(restored.scale.to_bits(), original.scale.to_bits());
        assert_eq!(restored, original);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("layer.json");
        let original = layer();
        save(&original, &path).unwrap();
        assert_eq!(load(&path).unwrap(), original);
        assert!(matches!(load(&dir.path().join("missing.json")), Err(Error::Io { .. })));
    }

    #[test]
    fn rejects_wrong_version_and_shapes() {
        let text = to_json(&layer()).unwrap();
        let bumped = text.replace("\"version\":1", "\"version\":2");
        assert!(matches!(from_json(&bumped), Err(Error::Schema(_))));
        let mut broken = layer();
        broken.experts.pop();
        let text = to_json(&broken).unwrap();
        assert!(matches!(from_json(&text), Err(Error::Schema(_))));
        assert!(matches!(from_json("{}"), Err(Error::Schema(_))));
    }

    #[test]
    fn refuses_non_finite_weights() {
        let mut l = layer();
        l.base[(0, 0)] = f64::NAN;
        assert!(matches!(to_json(&l), Err(Error::InvalidInput(_))));
    }
}
