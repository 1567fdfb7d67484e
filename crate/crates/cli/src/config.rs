//! Run configuration: built-in defaults, then `MEMSIM_SEED`, then the JSON
//! config file, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use memsim_core::crossbar::CrossbarConfig;
use memsim_core::device::DeviceModel;
use memsim_core::dpe::{EngineConfig, NoiseMode};
use memsim_core::apps::CenterUpdate;
use memsim_core::nn::LayerMode;
use memsim_core::slicing::SliceScheme;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

fn preset(name: &str) -> SliceScheme {
    SliceScheme::preset(name).expect("valid preset")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    /// Not echoed, so identical runs in different directories hash the same.
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub device: DeviceModel,
    pub crossbar: CrossbarConfig,
    pub weight_scheme: SliceScheme,
    pub input_scheme: SliceScheme,
    pub noise_mode: NoiseMode,
    pub irdrop_tol: f64,
    pub irdrop_max_iter: usize,
    pub xbar: XbarSection,
    pub matmul: MatmulSection,
    pub mc: McSection,
    pub solve: SolveSection,
    pub cwt: CwtSection,
    pub kmeans: KmeansSection,
    pub train: TrainSection,
    pub infer: InferSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = EngineConfig::default();
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            out: PathBuf::from("memsim-out"),
            device: e.device,
            crossbar: e.crossbar,
            weight_scheme: e.weight_scheme,
            input_scheme: e.input_scheme,
            noise_mode: e.noise_mode,
            irdrop_tol: e.irdrop_tol,
            irdrop_max_iter: e.irdrop_max_iter,
            xbar: XbarSection::default(),
            matmul: MatmulSection::default(),
            mc: McSection::default(),
            solve: SolveSection::default(),
            cwt: CwtSection::default(),
            kmeans: KmeansSection::default(),
            train: TrainSection::default(),
            infer: InferSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum XbarInput {
    /// Half-wave sine sequence on the word lines.
    #[default]
    Sine,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XbarSection {
    pub input: XbarInput,
    pub tol: f64,
    pub max_iter: usize,
    /// Also solve the full nodal system directly and report the deviation.
    pub oracle: bool,
}

impl Default for XbarSection {
    fn default() -> Self {
        Self {
            input: XbarInput::Sine,
            tol: 1e-6,
            max_iter: 100,
            oracle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatmulSection {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Operands are uniform in `[-range, range]`.
    pub range: f64,
}

impl Default for MatmulSection {
    fn default() -> Self {
        Self {
            m: 128,
            k: 128,
            n: 128,
            range: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub cvs: Vec<f64>,
    pub block_sizes: Vec<usize>,
    pub schemes: Vec<SliceScheme>,
    pub cycles: u64,
    /// Side of the square random operands.
    pub size: usize,
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            cvs: vec![0.0, 0.02, 0.05, 0.1, 0.2],
            block_sizes: vec![64],
            schemes: vec![preset("int8")],
            cycles: 100,
            size: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveSection {
    pub nodes: usize,
    pub r_wire: f64,
    /// Node leakage conductances are uniform in `[g_min, g_max]` siemens.
    pub g_min: f64,
    pub g_max: f64,
    pub drive: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Scheme for both the matrix and the search directions.
    pub scheme: SliceScheme,
    pub block: usize,
}

impl Default for SolveSection {
    fn default() -> Self {
        let r = 2.93;
        Self {
            nodes: 64,
            r_wire: r,
            g_min: 0.1 / r,
            g_max: 1.0 / r,
            drive: 1.0,
            tol: 1e-3,
            max_iter: 1000,
            scheme: preset("fp32"),
            block: 32,
        }
    }
}

/// Geometric scale grid, written `min:max:steps` on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleGrid {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

impl std::str::FromStr for ScaleGrid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let [a, b, n] = parts.as_slice() else {
            return Err(format!("expected min:max:steps, got `{s}`"));
        };
        let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}"));
        Ok(Self {
            min: num(a)?,
            max: num(b)?,
            steps: n.trim().parse().map_err(|e| format!("`{n}`: {e}"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CwtSection {
    /// Single-column CSV series; a synthetic chirp is used when absent.
    pub signal: Option<PathBuf>,
    pub length: usize,
    pub f0: f64,
    pub f1: f64,
    pub scales: ScaleGrid,
    pub omega0: f64,
    pub weight_scheme: SliceScheme,
    pub input_scheme: SliceScheme,
}

impl Default for CwtSection {
    fn default() -> Self {
        Self {
            signal: None,
            length: 1024,
            f0: 0.03,
            f1: 0.11,
            scales: ScaleGrid {
                min: 8.0,
                max: 32.0,
                steps: 24,
            },
            omega0: 6.0,
            weight_scheme: preset("int4"),
            input_scheme: preset("int8"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KmeansSection {
    /// Feature CSV; the synthetic three-cluster set is used when absent.
    pub input: Option<PathBuf>,
    pub k: usize,
    pub max_iter: usize,
    pub tail: usize,
    pub update: CenterUpdate,
    pub scheme: SliceScheme,
}

impl Default for KmeansSection {
    fn default() -> Self {
        Self {
            input: None,
            k: 3,
            max_iter: 100,
            tail: 10,
            update: CenterUpdate::All,
            scheme: preset("int8"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Directory with MNIST-style IDX files; synthetic digits when absent.
    pub data: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub mode: LayerMode,
    /// Per-layer overrides (JSON list).
    pub layer_config: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            data: None,
            train_limit: None,
            test_limit: None,
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            mode: LayerMode::Hardware,
            layer_config: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Number of one-bit slices for both operands.
    Slices,
    /// Device coefficient of variation.
    Cv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub kind: SweepKind,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub test_limit: Option<usize>,
    pub batch_size: usize,
    pub mode: LayerMode,
    pub layer_config: Option<PathBuf>,
    pub sweep: Option<Sweep>,
}

impl Default for InferSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            data: None,
            test_limit: None,
            batch_size: 100,
            mode: LayerMode::Hardware,
            layer_config: None,
            sweep: None,
        }
    }
}

impl RunConfig {
    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            device: self.device.clone(),
            crossbar: self.crossbar.clone(),
            weight_scheme: self.weight_scheme.clone(),
            input_scheme: self.input_scheme.clone(),
            noise_mode: self.noise_mode,
            seed: self.seed,
            irdrop_tol: self.irdrop_tol,
            irdrop_max_iter: self.irdrop_max_iter,
        }
    }

    /// Checks everything that does not depend on the subcommand.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::config(
                "version",
                format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version),
            ));
        }
        self.device.validate().map_err(|e| keyed("device", e))?;
        self.crossbar.validate().map_err(|e| keyed("crossbar", e))?;
        self.weight_scheme
            .check_levels(u64::from(self.device.g_levels), "weight scheme vs g_levels")
            .map_err(|e| CliError::config("weight_scheme", e.to_string()))?;
        self.input_scheme
            .check_levels(self.crossbar.rdac, "input scheme vs rdac")
            .map_err(|e| CliError::config("input_scheme", e.to_string()))?;
        self.engine().validate().map_err(|e| keyed("", e))
    }
}

/// Prefixes the offending parameter name with its section.
fn keyed(section: &str, e: memsim_core::Error) -> CliError {
    let key = match &e {
        memsim_core::Error::InvalidParameter { name, .. } if section.is_empty() => (*name).to_string(),
        memsim_core::Error::InvalidParameter { name, .. } => format!("{section}.{name}"),
        _ => section.to_string(),
    };
    CliError::config(key, e.to_string())
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Reads a config file; a run manifest is accepted too and yields its echoed config.
pub fn read_config_file(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config("config", format!("{}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::config("config", format!("{}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(CliError::config("config", "top level must be a JSON object"));
    }
    match (value.get("tool"), value.get("config")) {
        (Some(Value::String(t)), Some(cfg)) if t == "memsim" => Ok(cfg.clone()),
        _ => Ok(value),
    }
}

/// Defaults, then the `MEMSIM_SEED` value, then the file.
pub fn load(file: Option<&Path>, env_seed: Option<&str>) -> Result<RunConfig, CliError> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("serializable");
    if let Some(s) = env_seed {
        let seed: u64 = s
            .trim()
            .parse()
            .map_err(|_| CliError::config("MEMSIM_SEED", format!("not an unsigned integer: `{s}`")))?;
        value["seed"] = seed.into();
    }
    if let Some(path) = file {
        merge(&mut value, read_config_file(path)?);
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let key = e.path().to_string();
        CliError::config(if key == "." { "config".into() } else { key }, e.into_inner().to_string())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_reference_parameters() {
        let c = load(None, None).unwrap();
        assert_eq!(c.device.hgs, 1e-5);
        assert_eq!(c.device.lgs, 1e-7);
        assert_eq!(c.device.g_levels, 16);
        assert_eq!(c.device.cv, 0.05);
        assert_eq!((c.crossbar.rdac, c.crossbar.radc), (256, 1024));
        assert_eq!((c.crossbar.rows, c.crossbar.cols), (64, 64));
        c.validate().unwrap();
    }

    #[test]
    fn precedence_env_then_file() {
        assert_eq!(load(None, Some("9")).unwrap().seed, 9);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 3, "device": {"cv": 0.1}}"#).unwrap();
        let c = load(Some(&p), Some("9")).unwrap();
        assert_eq!((c.seed, c.device.cv, c.device.g_levels), (3, 0.1, 16));
        fs::write(&p, r#"{"device": {"cv": 0.1}}"#).unwrap();
        assert_eq!(load(Some(&p), Some("9")).unwrap().seed, 9);
        assert!(load(None, Some("x")).is_err());
    }

    #[test]
    fn unknown_keys_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"crossbar": {"rowz": 3}}"#).unwrap();
        let e = load(Some(&p), None).unwrap_err();
        assert!(e.key.as_deref().unwrap().starts_with("crossbar"), "{e:?}");
        assert!(e.message.contains("rowz"));
    }

    #[test]
    fn validation_names_the_key() {
        let mut c = RunConfig::default();
        c.device.g_levels = 1;
        assert_eq!(c.validate().unwrap_err().key.as_deref(), Some("device.g_levels"));
        let mut c = RunConfig::default();
        c.version = 2;
        assert_eq!(c.validate().unwrap_err().key.as_deref(), Some("version"));
    }

    #[test]
    fn scale_grid_parses() {
        let g: ScaleGrid = "8:32:24".parse().unwrap();
        assert_eq!((g.min, g.max, g.steps), (8.0, 32.0, 24));
        assert!("8:32".parse::<ScaleGrid>().is_err());
    }
}
