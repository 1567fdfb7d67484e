use serde::{Deserialize, Serialize};

use super::layers::{LayerMode, MemLayerConfig, Model, StalePolicy};
use crate::dpe::EngineConfig;
use crate::error::{Error, Result};
use crate::slicing::SliceScheme;

/// Per-layer setting; unset fields fall back to the base engine.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerOverride {
    pub mode: Option<LayerMode>,
    pub weight_scheme: Option<SliceScheme>,
    pub input_scheme: Option<SliceScheme>,
}

/// Configures every parametric layer from `base` plus one override per layer.
///
/// An empty list applies `base` everywhere. Otherwise the list length must
/// equal the number of parametric layers.
pub fn apply_overrides(model: &mut Model, base_mode: LayerMode, base: &EngineConfig, overrides: &[LayerOverride]) -> Result<()> {
    let n = model.num_parametric();
    if !overrides.is_empty() && overrides.len() != n {
        return Err(Error::dims(
            "layer overrides",
            format!("{} entries for {n} parametric layers", overrides.len()),
        ));
    }
    let mut configs = Vec::with_capacity(n);
    for i in 0..n {
        let o = overrides.get(i).cloned().unwrap_or_default();
        let mut engine = base.clone();
        engine.seed = engine.seed.wrapping_add(i as u64);
        if let Some(s) = o.weight_scheme {
            engine.weight_scheme = s;
        }
        if let Some(s) = o.input_scheme {
            engine.input_scheme = s;
        }
        let cfg = MemLayerConfig {
            mode: o.mode.unwrap_or(base_mode),
            engine: Some(engine),
            stale_policy: StalePolicy::UseCache,
        };
        cfg.validate()?;
        configs.push(cfg);
    }
    model.configure(|i| configs[i].clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_per_layer() {
        let mut m = Model::mlp(&[4, 3, 2], 0);
        let ov: Vec<LayerOverride> = serde_json::from_str(
            r#"[{"mode": "digital"}, {"weight_scheme": "int4:1,1,2", "input_scheme": "fp:16:1,1,2,4,4"}]"#,
        )
        .unwrap();
        apply_overrides(&mut m, LayerMode::Hardware, &EngineConfig::default(), &ov).unwrap();
        let c = m.configs();
        assert_eq!(c[0].mode, LayerMode::Digital);
        assert_eq!(c[1].mode, LayerMode::Hardware);
        let e = c[1].engine.as_ref().unwrap();
        assert_eq!(e.weight_scheme.to_string(), "int4:1,1,2");
        assert!(e.input_scheme.is_fp());
        assert_eq!(e.seed, EngineConfig::default().seed + 1);
    }

    #[test]
    fn length_mismatch_and_unknown_keys_rejected() {
        let mut m = Model::mlp(&[4, 3, 2], 0);
        let one = vec![LayerOverride::default()];
        assert!(apply_overrides(&mut m, LayerMode::Hardware, &EngineConfig::default(), &one).is_err());
        assert!(serde_json::from_str::<LayerOverride>(r#"{"modes": "digital"}"#).is_err());
    }
}
