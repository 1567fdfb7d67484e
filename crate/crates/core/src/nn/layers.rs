use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{img2col, kernel_matrix, ConvGeometry, Tensor};
use crate::dpe::{matmul as dpe_matmul, program_weights, EngineConfig, ProgrammedWeights};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Purpose, SeededRng, StreamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    /// Forward pass on the simulated crossbars.
    Hardware,
    /// Exact floating-point forward pass.
    #[default]
    Digital,
}

/// What a hardware forward does when the master weights changed after the
/// last `update_weight`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StalePolicy {
    /// Keep computing with the programmed (older) weights.
    #[default]
    UseCache,
    /// Refuse with [`Error::StaleCache`].
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct MemLayerConfig {
    pub mode: LayerMode,
    /// Engine (device, array, input and weight schemes); required in hardware mode.
    pub engine: Option<EngineConfig>,
    pub stale_policy: StalePolicy,
}

impl MemLayerConfig {
    pub fn digital() -> Self {
        Self::default()
    }

    pub fn hardware(engine: EngineConfig) -> Self {
        Self {
            mode: LayerMode::Hardware,
            engine: Some(engine),
            stale_policy: StalePolicy::UseCache,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.mode, &self.engine) {
            (LayerMode::Hardware, None) => Err(Error::Incompatible("hardware mode requires an engine".into())),
            (LayerMode::Hardware, Some(e)) => e.validate(),
            _ => Ok(()),
        }
    }
}

/// Programmed copy of a layer's weight matrix and the weight version it encodes.
#[derive(Debug, Clone)]
struct WeightCache {
    programmed: ProgrammedWeights,
    version: u64,
}

/// State shared by the two parametric layer kinds.
#[derive(Debug, Clone)]
struct HardwareState {
    config: MemLayerConfig,
    cache: Option<WeightCache>,
    version: u64,
    next_cycle: u64,
    vars: Option<(Var, Var)>,
}

impl HardwareState {
    fn new(config: MemLayerConfig) -> Self {
        Self {
            config,
            cache: None,
            version: 0,
            next_cycle: 0,
            vars: None,
        }
    }

    fn engine(&self) -> Result<&EngineConfig> {
        self.config
            .engine
            .as_ref()
            .ok_or_else(|| Error::Incompatible("hardware mode requires an engine".into()))
    }

    fn program(&mut self, w: &Matrix, cycle: u64) -> Result<()> {
        self.config.validate()?;
        if self.config.mode == LayerMode::Digital {
            return Ok(());
        }
        let programmed = program_weights(w, self.engine()?, cycle)?;
        self.cache = Some(WeightCache {
            programmed,
            version: self.version,
        });
        Ok(())
    }

    fn update(&mut self, w: &Matrix, name: &str) -> Result<()> {
        if !w.is_finite() {
            return Err(Error::NonFinite { context: "update_weight" });
        }
        let cycle = self.next_cycle;
        self.program(w, cycle).map_err(|e| match e {
            Error::Incompatible(m) => Error::Incompatible(format!("{name}: {m}")),
            other => other,
        })?;
        self.next_cycle += 1;
        Ok(())
    }

    /// Hardware product of `x` with the cached weights.
    fn hardware_product(&self, x: &Matrix, name: &str) -> Result<Matrix> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::NotProgrammed(format!("{name}: call update_weight first")))?;
        if cache.version != self.version && self.config.stale_policy == StalePolicy::Error {
            return Err(Error::StaleCache(format!("{name}: weights changed since update_weight")));
        }
        Ok(dpe_matmul(x, &cache.programmed, self.engine()?)?.result)
    }
}

fn kaiming_uniform(n: usize, fan_in: usize, seed: u64, layer: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut r = SeededRng::new(seed, StreamId::new(Purpose::Init).block(layer, 0));
    (0..n).map(|_| r.uniform(-bound, bound)).collect()
}

/// Fully connected layer `y = x · W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone)]
pub struct MemLinear {
    weight: Matrix,
    bias: Vec<f64>,
    state: HardwareState,
}

impl MemLinear {
    pub fn new(in_features: usize, out_features: usize, seed: u64, index: usize) -> Self {
        let w = kaiming_uniform(in_features * out_features, in_features, seed, index);
        Self::from_parts(
            Matrix::from_vec(in_features, out_features, w).expect("sizes agree"),
            vec![0.0; out_features],
        )
        .expect("sizes agree")
    }

    pub fn from_parts(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::dims("MemLinear", format!("{} biases for {} outputs", bias.len(), weight.cols())));
        }
        Ok(Self {
            weight,
            bias,
            state: HardwareState::new(MemLayerConfig::digital()),
        })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn config(&self) -> &MemLayerConfig {
        &self.state.config
    }

    /// Replaces the layer configuration and drops any programmed copy.
    pub fn set_config(&mut self, config: MemLayerConfig) -> Result<()> {
        config.validate()?;
        self.state.config = config;
        self.state.cache = None;
        Ok(())
    }

    /// Mutable master parameters; counts as a weight change.
    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        self.state.version += 1;
        (self.weight.data_mut(), &mut self.bias)
    }

    /// Re-programs the crossbar copy from the master weights with a fresh variation draw.
    pub fn update_weight(&mut self) -> Result<()> {
        self.state.update(&self.weight, "linear")
    }

    /// Programs the crossbar copy for an explicit programming cycle.
    pub fn program_cycle(&mut self, cycle: u64) -> Result<()> {
        self.state.program(&self.weight, cycle)
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let wv = g.leaf(Tensor::from_matrix(&self.weight));
        let bv = g.leaf(Tensor::new(vec![self.bias.len()], self.bias.clone())?);
        let prod = match self.state.config.mode {
            LayerMode::Digital => g.matmul(x, wv)?,
            LayerMode::Hardware => {
                let xm = g.value(x).to_matrix()?;
                let value = self.state.hardware_product(&xm, "linear")?;
                g.matmul_with_value(x, wv, value)?
            }
        };
        self.state.vars = Some((wv, bv));
        g.add_bias(prod, bv)
    }

    /// Gradients of the last recorded forward, flattened like [`Self::params_mut`].
    pub fn grads(&self, g: &Graph) -> Result<(Vec<f64>, Vec<f64>)> {
        collect_grads(g, self.state.vars, self.weight.data().len(), self.bias.len())
    }
}

fn collect_grads(g: &Graph, vars: Option<(Var, Var)>, nw: usize, nb: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (wv, bv) = vars.ok_or_else(|| Error::MissingActivations("no forward pass recorded".into()))?;
    let gw = g.grad(wv).map_or_else(|| vec![0.0; nw], |t| t.data().to_vec());
    let gb = g.grad(bv).map_or_else(|| vec![0.0; nb], |t| t.data().to_vec());
    Ok((gw, gb))
}

/// 2-D convolution with `(out, in, kh, kw)` kernels, lowered to a matrix product via img2col.
#[derive(Debug, Clone)]
pub struct MemConv2d {
    weight: Tensor,
    bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
    state: HardwareState,
}

impl MemConv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, seed: u64, index: usize) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = kaiming_uniform(out_ch * fan_in, fan_in, seed, index);
        Self::from_parts(
            Tensor::new(vec![out_ch, in_ch, kernel, kernel], w).expect("sizes agree"),
            vec![0.0; out_ch],
            1,
            0,
        )
        .expect("sizes agree")
    }

    pub fn from_parts(weight: Tensor, bias: Vec<f64>, stride: usize, padding: usize) -> Result<Self> {
        let (o, _, _, _) = weight.dims4()?;
        if bias.len() != o {
            return Err(Error::dims("MemConv2d", format!("{} biases for {o} channels", bias.len())));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            state: HardwareState::new(MemLayerConfig::digital()),
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn config(&self) -> &MemLayerConfig {
        &self.state.config
    }

    pub fn set_config(&mut self, config: MemLayerConfig) -> Result<()> {
        config.validate()?;
        self.state.config = config;
        self.state.cache = None;
        Ok(())
    }

    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        self.state.version += 1;
        (self.weight.data_mut(), &mut self.bias)
    }

    pub fn update_weight(&mut self) -> Result<()> {
        let k = kernel_matrix(&self.weight)?;
        self.state.update(&k, "conv2d")
    }

    pub fn program_cycle(&mut self, cycle: u64) -> Result<()> {
        let k = kernel_matrix(&self.weight)?;
        self.state.program(&k, cycle)
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let wv = g.leaf(self.weight.clone());
        let bv = g.leaf(Tensor::new(vec![self.bias.len()], self.bias.clone())?);
        let conv = match self.state.config.mode {
            LayerMode::Digital => g.conv2d(x, wv, self.stride, self.padding)?,
            LayerMode::Hardware => {
                let (_, _, kh, kw) = self.weight.dims4()?;
                let geo = ConvGeometry {
                    kh,
                    kw,
                    stride: self.stride,
                    padding: self.padding,
                };
                let cols = img2col(g.value(x), geo)?;
                let product = self.state.hardware_product(&cols, "conv2d")?;
                g.conv2d_with_value(x, wv, self.stride, self.padding, product)?
            }
        };
        self.state.vars = Some((wv, bv));
        g.add_bias(conv, bv)
    }

    pub fn grads(&self, g: &Graph) -> Result<(Vec<f64>, Vec<f64>)> {
        collect_grads(g, self.state.vars, self.weight.numel(), self.bias.len())
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(MemLinear),
    Conv2d(MemConv2d),
    Relu,
    MaxPool2,
    Flatten,
}

/// Feed-forward stack of layers.
#[derive(Debug, Clone, Default)]
pub struct Model {
    pub layers: Vec<Layer>,
}

impl Model {
    /// Conv(1→6, 5x5) → ReLU → pool → Conv(6→16, 5x5) → ReLU → pool →
    /// flatten → FC(256→120) → ReLU → FC(120→10), for 1x28x28 inputs.
    pub fn desk_cnn(seed: u64) -> Self {
        Self {
            layers: vec![
                Layer::Conv2d(MemConv2d::new(1, 6, 5, seed, 0)),
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv2d(MemConv2d::new(6, 16, 5, seed, 1)),
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Flatten,
                Layer::Linear(MemLinear::new(256, 120, seed, 2)),
                Layer::Relu,
                Layer::Linear(MemLinear::new(120, 10, seed, 3)),
            ],
        }
    }

    /// Multilayer perceptron with ReLU between the given widths.
    pub fn mlp(widths: &[usize], seed: u64) -> Self {
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            if i > 0 {
                layers.push(Layer::Relu);
            }
            layers.push(Layer::Linear(MemLinear::new(pair[0], pair[1], seed, i)));
        }
        Self { layers }
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &mut self.layers {
            h = match layer {
                Layer::Linear(l) => l.forward(g, h)?,
                Layer::Conv2d(c) => c.forward(g, h)?,
                Layer::Relu => g.relu(h),
                Layer::MaxPool2 => g.maxpool2(h)?,
                Layer::Flatten => g.flatten(h)?,
            };
        }
        Ok(h)
    }

    /// Number of layers with parameters.
    pub fn num_parametric(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Linear(_) | Layer::Conv2d(_)))
            .count()
    }

    /// Applies `f` to every parametric layer's config slot, in order.
    pub fn configure(&mut self, mut f: impl FnMut(usize) -> MemLayerConfig) -> Result<()> {
        let mut idx = 0;
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) => {
                    l.set_config(f(idx))?;
                    idx += 1;
                }
                Layer::Conv2d(c) => {
                    c.set_config(f(idx))?;
                    idx += 1;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Same config on every parametric layer, with the engine seed offset by
    /// the layer index so each layer draws its own noise.
    pub fn configure_all(&mut self, config: &MemLayerConfig) -> Result<()> {
        self.configure(|i| {
            let mut c = config.clone();
            if let Some(e) = c.engine.as_mut() {
                e.seed = e.seed.wrapping_add(i as u64);
            }
            c
        })
    }

    pub fn configs(&self) -> Vec<MemLayerConfig> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Linear(x) => Some(x.config().clone()),
                Layer::Conv2d(x) => Some(x.config().clone()),
                _ => None,
            })
            .collect()
    }

    pub fn has_hardware(&self) -> bool {
        self.configs().iter().any(|c| c.mode == LayerMode::Hardware)
    }

    /// Calls `update_weight` on every hardware layer.
    pub fn update_weights(&mut self) -> Result<()> {
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) if l.config().mode == LayerMode::Hardware => l.update_weight()?,
                Layer::Conv2d(c) if c.config().mode == LayerMode::Hardware => c.update_weight()?,
                _ => {}
            }
        }
        Ok(())
    }

    /// Programs every hardware layer for one explicit cycle.
    pub fn program_cycle(&mut self, cycle: u64) -> Result<()> {
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) => l.program_cycle(cycle)?,
                Layer::Conv2d(c) => c.program_cycle(cycle)?,
                _ => {}
            }
        }
        Ok(())
    }

    /// Parameter gradients of the last forward, one `(weights, bias)` pair per parametric layer.
    pub fn grads(&self, g: &Graph) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Linear(x) => Some(x.grads(g)),
                Layer::Conv2d(x) => Some(x.grads(g)),
                _ => None,
            })
            .collect()
    }

    /// Mutable master parameters, in the same order as [`Self::grads`].
    pub fn params_mut(&mut self) -> Vec<(&mut [f64], &mut [f64])> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Linear(x) => Some(x.params_mut()),
                Layer::Conv2d(x) => Some(x.params_mut()),
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpe::NoiseMode;
    use crate::numerics::matmul_exact;
    use crate::slicing::SliceScheme;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = SeededRng::new(seed, StreamId::new(Purpose::Test));
        Matrix::from_fn(rows, cols, |_, _| r.uniform(-1.0, 1.0))
    }

    fn exact_engine() -> EngineConfig {
        let mut e = EngineConfig {
            noise_mode: NoiseMode::Ideal,
            ..EngineConfig::default()
        };
        e.device.cv = 0.0;
        e.crossbar.r_wire = 0.0;
        e.crossbar = e.crossbar.with_ideal_converters().with_size(16, 16);
        e
    }

    fn run_linear(layer: &mut MemLinear, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::from_matrix(x));
        let out = layer.forward(&mut g, xv)?;
        g.value(out).to_matrix()
    }

    #[test]
    fn digital_linear_is_exact_matmul_plus_bias() {
        let mut l = MemLinear::from_parts(random(5, 4, 1), vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let x = random(3, 5, 2);
        let got = run_linear(&mut l, &x).unwrap();
        let mut want = matmul_exact(&x, l.weight()).unwrap();
        for i in 0..3 {
            for (j, b) in l.bias().iter().enumerate() {
                want[(i, j)] += b;
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn noise_free_hardware_linear_matches_integer_oracle() {
        let mut r = SeededRng::new(3, StreamId::new(Purpose::Test));
        let mut w = Matrix::from_fn(16, 16, |_, _| r.index(255) as f64 - 127.0);
        let mut x = Matrix::from_fn(16, 16, |_, _| r.index(255) as f64 - 127.0);
        w[(0, 0)] = 127.0;
        x[(0, 0)] = 127.0;
        let mut l = MemLinear::from_parts(w.clone(), vec![0.0; 16]).unwrap();
        l.set_config(MemLayerConfig::hardware(exact_engine())).unwrap();
        l.update_weight().unwrap();
        assert_eq!(run_linear(&mut l, &x).unwrap(), matmul_exact(&x, &w).unwrap());
    }

    #[test]
    fn forward_requires_programming() {
        let mut l = MemLinear::new(4, 3, 1, 0);
        l.set_config(MemLayerConfig::hardware(EngineConfig::default())).unwrap();
        assert!(matches!(run_linear(&mut l, &random(2, 4, 4)), Err(Error::NotProgrammed(_))));
        assert!(MemLayerConfig {
            mode: LayerMode::Hardware,
            engine: None,
            stale_policy: StalePolicy::UseCache
        }
        .validate()
        .is_err());
    }

    #[test]
    fn cache_semantics_after_optimizer_step() {
        let mut l = MemLinear::new(8, 4, 2, 0);
        l.set_config(MemLayerConfig::hardware(exact_engine())).unwrap();
        l.update_weight().unwrap();
        let x = random(3, 8, 5);
        let before = run_linear(&mut l, &x).unwrap();
        // An optimizer step on the weights only.
        l.params_mut().0.iter_mut().for_each(|w| *w *= -0.5);
        assert_eq!(run_linear(&mut l, &x).unwrap(), before);
        let mut strict = l.clone();
        let mut cfg = strict.config().clone();
        cfg.stale_policy = StalePolicy::Error;
        strict.state.config = cfg;
        assert!(matches!(run_linear(&mut strict, &x), Err(Error::StaleCache(_))));
        l.update_weight().unwrap();
        assert_ne!(run_linear(&mut l, &x).unwrap(), before);
    }

    #[test]
    fn update_weight_is_deterministic_per_cycle() {
        let mut a = MemLinear::new(20, 10, 3, 0);
        a.set_config(MemLayerConfig::hardware(EngineConfig::default())).unwrap();
        let mut b = a.clone();
        a.update_weight().unwrap();
        b.update_weight().unwrap();
        let x = random(4, 20, 6);
        assert_eq!(run_linear(&mut a, &x).unwrap(), run_linear(&mut b, &x).unwrap());
        // A second update draws a fresh programming cycle.
        let first = run_linear(&mut a, &x).unwrap();
        a.update_weight().unwrap();
        assert_ne!(run_linear(&mut a, &x).unwrap(), first);
    }

    #[test]
    fn gradients_independent_of_cache_and_mode() {
        let readout: Vec<f64> = (0..3 * 6).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = random(3, 9, 7);
        let grads = |layer: &mut MemLinear| {
            let mut g = Graph::new();
            let xv = g.leaf(Tensor::from_matrix(&x));
            let out = layer.forward(&mut g, xv).unwrap();
            let l = g.weighted_sum(out, &readout).unwrap();
            g.backward(l).unwrap();
            (layer.grads(&g).unwrap(), g.grad(xv).unwrap().clone())
        };
        let mut l = MemLinear::new(9, 6, 4, 0);
        let digital = grads(&mut l);
        l.set_config(MemLayerConfig::hardware(EngineConfig::default())).unwrap();
        l.update_weight().unwrap();
        let hw_a = grads(&mut l);
        // Perturb the cache with a different programming draw.
        l.program_cycle(99).unwrap();
        let hw_b = grads(&mut l);
        assert_eq!(digital, hw_a);
        assert_eq!(hw_a, hw_b);
    }

    #[test]
    fn layer_scheme_change_leaves_other_layers_untouched() {
        let x = Tensor::from_matrix(&random(4, 12, 8));
        let base = MemLayerConfig::hardware(EngineConfig::default());
        let first_layer_output = |model: &mut Model| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let Layer::Linear(l) = &mut model.layers[0] else { unreachable!() };
            let out = l.forward(&mut g, xv).unwrap();
            g.value(out).clone()
        };
        let mut a = Model::mlp(&[12, 8, 3], 1);
        a.configure_all(&base).unwrap();
        let mut b = a.clone();
        a.update_weights().unwrap();
        b.configure(|i| {
            let mut c = base.clone();
            if let Some(e) = c.engine.as_mut() {
                e.seed += i as u64;
                if i == 1 {
                    *e = e.clone().with_schemes(SliceScheme::preset("int4").unwrap());
                }
            }
            c
        })
        .unwrap();
        b.update_weights().unwrap();
        assert_eq!(first_layer_output(&mut a), first_layer_output(&mut b));
    }

    #[test]
    fn conv_hardware_exact_matches_digital() {
        let mut conv = MemConv2d::new(2, 3, 3, 5, 0);
        let mut r = SeededRng::new(9, StreamId::new(Purpose::Test));
        let x = Tensor::new(vec![2, 2, 6, 6], (0..144).map(|_| r.uniform(-1.0, 1.0)).collect()).unwrap();
        let run = |c: &mut MemConv2d| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let o = c.forward(&mut g, xv).unwrap();
            g.value(o).clone()
        };
        let digital = run(&mut conv);
        let mut e = exact_engine();
        e = e.with_schemes(SliceScheme::preset("fp32").unwrap());
        e.device.g_levels = 16;
        conv.set_config(MemLayerConfig::hardware(e)).unwrap();
        conv.update_weight().unwrap();
        let hw = run(&mut conv);
        for (a, b) in hw.data().iter().zip(digital.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}
