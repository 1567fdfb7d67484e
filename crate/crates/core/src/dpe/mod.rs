//! Dot-product engine: encode, slice, program, evaluate, convert, recombine.
//!
//! Weights are tiled into crossbar-sized blocks; every weight slice of every
//! block occupies one array, so a scheme with `N_s` slices activates `N_s`
//! array groups. Inputs are tiled into `rows x rows` blocks, quantized per
//! block and sliced; every (input slice, weight slice) pair is one analog
//! evaluation whose ADC codes are decoded back to an integer dot product.

mod monte_carlo;

pub use monte_carlo::{monte_carlo, quantile, McGrid, McRecord, McSummary, McTable};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossbar::{adc_code, adc_decode, dac_fraction, irdrop_transfer, AdcRangeMode, CrossbarConfig};
use crate::device::{sample_in_place, DeviceModel};
use crate::error::{Error, Result};
use crate::numerics::{matmul_exact, Matrix, Purpose, SeededRng, StreamId};
use crate::slicing::{descale, encode_block, recombine, slice_signed, BlockPlan, PairResults, SliceScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// No programming variation and no wire resistance.
    Ideal,
    /// Lognormal programming variation only.
    #[default]
    VariationOnly,
    /// Programming variation plus the IR-drop circuit solve.
    VariationPlusIrdrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub device: DeviceModel,
    pub crossbar: CrossbarConfig,
    pub weight_scheme: SliceScheme,
    pub input_scheme: SliceScheme,
    pub noise_mode: NoiseMode,
    pub seed: u64,
    /// Convergence threshold of the IR-drop solve (relative to `v_read`).
    pub irdrop_tol: f64,
    pub irdrop_max_iter: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let int8 = SliceScheme::preset("int8").expect("valid preset");
        Self {
            device: DeviceModel::default(),
            crossbar: CrossbarConfig::default(),
            weight_scheme: int8.clone(),
            input_scheme: int8,
            noise_mode: NoiseMode::VariationOnly,
            seed: 0,
            irdrop_tol: 1e-6,
            irdrop_max_iter: 50,
        }
    }
}

impl EngineConfig {
    pub fn with_schemes(mut self, scheme: SliceScheme) -> Self {
        self.weight_scheme = scheme.clone();
        self.input_scheme = scheme;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        self.crossbar.validate()?;
        self.weight_scheme
            .check_levels(u64::from(self.device.g_levels), "weight scheme vs g_levels")?;
        self.input_scheme.check_levels(self.crossbar.rdac, "input scheme vs rdac")?;
        if !(self.irdrop_tol > 0.0) {
            return Err(Error::param("irdrop_tol", "must be > 0"));
        }
        if self.irdrop_max_iter == 0 {
            return Err(Error::param("irdrop_max_iter", "must be >= 1"));
        }
        Ok(())
    }

    fn applies_variation(&self) -> bool {
        self.noise_mode != NoiseMode::Ideal && self.device.cv > 0.0
    }

    fn applies_irdrop(&self) -> bool {
        self.noise_mode == NoiseMode::VariationPlusIrdrop && self.crossbar.r_wire > 0.0
    }
}

/// One weight slice of one block, as programmed on one array.
#[derive(Debug, Clone)]
pub struct ProgrammedSlice {
    pub width: u32,
    pub significance: i64,
    /// Conductance levels per unit of slice value.
    pub level_step: u32,
    /// Programmed conductances of the whole array (padding included).
    pub conductance: Matrix,
    /// Voltage-to-current map restricted to the occupied rows and columns.
    response: Matrix,
}

#[derive(Debug, Clone)]
pub struct ProgrammedBlock {
    pub scale: f64,
    pub slices: Vec<ProgrammedSlice>,
}

/// Weight matrix mapped onto crossbar arrays for one programming cycle.
#[derive(Debug, Clone)]
pub struct ProgrammedWeights {
    pub plan: BlockPlan,
    pub scheme: SliceScheme,
    pub blocks: Vec<ProgrammedBlock>,
    pub cycle: u64,
    /// Largest IR-drop iteration count among the programmed arrays.
    pub iterations: usize,
    pub converged: bool,
}

impl ProgrammedWeights {
    pub fn shape(&self) -> (usize, usize) {
        (self.plan.rows, self.plan.cols)
    }

    /// Number of array groups in use, one per weight slice.
    pub fn active_array_groups(&self) -> usize {
        self.scheme.num_slices()
    }

    pub fn block(&self, br: usize, bc: usize) -> &ProgrammedBlock {
        &self.blocks[self.plan.index(br, bc)]
    }
}

/// Conductance level multiplier that spreads a `width`-bit slice over the
/// device's level range.
fn level_step_for(width: u32, g_levels: u32) -> u32 {
    (g_levels - 1) / ((1u32 << width) - 1)
}

/// Quantizes or aligns, slices and programs `w` (`k x n`) onto arrays.
///
/// Variation is drawn once per call from streams keyed by block, slice and
/// `cycle`, so the same seed and cycle reproduce the same conductances.
pub fn program_weights(w: &Matrix, cfg: &EngineConfig, cycle: u64) -> Result<ProgrammedWeights> {
    cfg.validate()?;
    if !w.is_finite() {
        return Err(Error::NonFinite {
            context: "program_weights",
        });
    }
    let (ar, ac) = (cfg.crossbar.rows, cfg.crossbar.cols);
    let plan = BlockPlan::new(w.rows(), w.cols(), ar, ac)?;
    let device = &cfg.device;
    let step = device.level_step();
    let variation = cfg.applies_variation();
    let irdrop = cfg.applies_irdrop();

    let tasks: Vec<(usize, usize)> = (0..plan.grid_rows)
        .flat_map(|br| (0..plan.grid_cols).map(move |bc| (br, bc)))
        .collect();
    let programmed: Vec<(ProgrammedBlock, usize, bool)> = tasks
        .par_iter()
        .map(|&(br, bc)| -> Result<(ProgrammedBlock, usize, bool)> {
            let (r0, c0) = plan.origin(br, bc);
            let (er, ec) = plan.extent(br, bc);
            let enc = encode_block(&w.window(r0, c0, ar, ac), &cfg.weight_scheme)?;
            let slices = slice_signed(&enc.codes, &cfg.weight_scheme)?;
            let mut out = Vec::with_capacity(slices.len());
            let mut iterations = 0;
            let mut converged = true;
            for (s, slice) in slices.into_iter().enumerate() {
                let k = level_step_for(slice.width, device.g_levels);
                let data = slice
                    .values
                    .iter()
                    .map(|&v| device.lgs + f64::from(v * k) * step)
                    .collect();
                let mut g = Matrix::from_vec(ar, ac, data)?;
                if variation {
                    let id = StreamId::new(Purpose::Program).block(br, bc).slice(s).cycle(cycle);
                    sample_in_place(g.data_mut(), device, &mut SeededRng::new(cfg.seed, id))?;
                }
                let response = if irdrop {
                    let t = irdrop_transfer(&g, &cfg.crossbar, cfg.irdrop_tol, cfg.irdrop_max_iter)?;
                    iterations = iterations.max(t.iterations);
                    converged &= t.converged;
                    t.matrix.window(0, 0, er, ec)
                } else {
                    g.window(0, 0, er, ec)
                };
                out.push(ProgrammedSlice {
                    width: slice.width,
                    significance: slice.significance,
                    level_step: k,
                    conductance: g,
                    response,
                });
            }
            Ok((
                ProgrammedBlock {
                    scale: enc.scale,
                    slices: out,
                },
                iterations,
                converged,
            ))
        })
        .collect::<Result<_>>()?;

    let iterations = programmed.iter().map(|p| p.1).max().unwrap_or(0);
    let converged = programmed.iter().all(|p| p.2);
    Ok(ProgrammedWeights {
        plan,
        scheme: cfg.weight_scheme.clone(),
        blocks: programmed.into_iter().map(|p| p.0).collect(),
        cycle,
        iterations,
        converged,
    })
}

/// Per output block diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub block_row: usize,
    pub block_col: usize,
    /// ADC conversions that hit full scale.
    pub saturated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatmulReport {
    pub result: Matrix,
    pub relative_error: Option<f64>,
    pub block_stats: Vec<BlockStats>,
    pub iterations: usize,
    pub converged: bool,
    pub cycle: u64,
}

impl MatmulReport {
    /// Fills in the relative error against a reference product.
    pub fn with_reference(mut self, ideal: &Matrix) -> Result<Self> {
        self.relative_error = Some(relative_error(&self.result, ideal)?);
        Ok(self)
    }
}

/// One input block sliced and converted to DAC voltages.
struct InputBlock {
    scale: f64,
    /// Per input slice: voltages (`rows x k_eff`) and the per-row sum of DAC fractions.
    slices: Vec<(Matrix, Vec<f64>, u32, i64)>,
}

fn prepare_inputs(x: &Matrix, plan: &BlockPlan, cfg: &EngineConfig) -> Result<Vec<InputBlock>> {
    let rdac = cfg.crossbar.rdac;
    let v_read = cfg.crossbar.v_read;
    (0..plan.num_blocks())
        .into_par_iter()
        .map(|idx| {
            let (p, q) = (idx / plan.grid_cols, idx % plan.grid_cols);
            let (r0, c0) = plan.origin(p, q);
            let (er, ec) = plan.extent(p, q);
            let enc = encode_block(&x.window(r0, c0, er, ec), &cfg.input_scheme)?;
            let slices = slice_signed(&enc.codes, &cfg.input_scheme)?
                .into_iter()
                .map(|s| {
                    let top = f64::from((1u32 << s.width) - 1);
                    let fracs: Vec<f64> = s.values.iter().map(|&v| dac_fraction(f64::from(v) / top, rdac)).collect();
                    let sums = fracs.chunks(ec).map(|r| r.iter().sum()).collect();
                    let volts = Matrix::from_vec(er, ec, fracs.iter().map(|u| u * v_read).collect())
                        .expect("shape preserved");
                    (volts, sums, s.width, s.significance)
                })
                .collect();
            Ok(InputBlock {
                scale: enc.scale,
                slices,
            })
        })
        .collect()
}

/// Multiplies `x` (`m x k`) by programmed weights (`k x n`) on the simulated hardware.
pub fn matmul(x: &Matrix, programmed: &ProgrammedWeights, cfg: &EngineConfig) -> Result<MatmulReport> {
    cfg.validate()?;
    let (k, n) = programmed.shape();
    if x.cols() != k {
        return Err(Error::dims(
            "dpe::matmul",
            format!("input {}x{} times weights {k}x{n}", x.rows(), x.cols()),
        ));
    }
    if (cfg.crossbar.rows, cfg.crossbar.cols) != (programmed.plan.l_blk_m, programmed.plan.l_blk_n) {
        return Err(Error::Incompatible("weights were programmed for a different array size".into()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite { context: "dpe::matmul" });
    }
    let ar = cfg.crossbar.rows;
    let in_plan = BlockPlan::new(x.rows(), k, ar, ar)?;
    let inputs = prepare_inputs(x, &in_plan, cfg)?;

    let xb = &cfg.crossbar;
    let dev = &cfg.device;
    let step = dev.level_step();
    let w_sigs: Vec<i64> = programmed.scheme.significances();
    let in_sigs: Vec<i64> = cfg.input_scheme.significances();
    let grid_cols = programmed.plan.grid_cols;

    let tasks: Vec<(usize, usize)> = (0..in_plan.grid_rows)
        .flat_map(|p| (0..grid_cols).map(move |r| (p, r)))
        .collect();
    let outputs: Vec<(Matrix, BlockStats)> = tasks
        .par_iter()
        .map(|&(p, r)| -> Result<(Matrix, BlockStats)> {
            let (er, _) = in_plan.extent(p, 0);
            let (_, ec) = programmed.plan.extent(0, r);
            let mut acc = vec![0.0; er * ec];
            let mut saturated = 0;
            for q in 0..in_plan.grid_cols {
                let xin = &inputs[in_plan.index(p, q)];
                let wblk = programmed.block(q, r);
                let mut pairs = PairResults::new(xin.slices.len(), wblk.slices.len(), er * ec);
                for (i, (volts, usum, w_in, _)) in xin.slices.iter().enumerate() {
                    let in_top = f64::from((1u32 << w_in) - 1);
                    for (j, ws) in wblk.slices.iter().enumerate() {
                        let currents = matmul_exact(volts, &ws.response)?;
                        let fs = match xb.adc_range_mode {
                            AdcRangeMode::WorstCase => xb.v_read * dev.hgs * ar as f64,
                            AdcRangeMode::Dynamic => currents.max_abs(),
                        };
                        let unit = f64::from(ws.level_step) * step;
                        let dots = currents
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(idx, &c)| {
                                let sensed = if fs > 0.0 {
                                    let code = adc_code(c, fs, xb.radc);
                                    if code == xb.radc - 1 && c > fs {
                                        saturated += 1;
                                    }
                                    adc_decode(code, fs, xb.radc)
                                } else {
                                    0.0
                                };
                                let row = idx / ec;
                                ((sensed / xb.v_read - dev.lgs * usum[row]) * in_top / unit).round() as i64
                            })
                            .collect();
                        pairs.set(i, j, dots)?;
                    }
                }
                let ints = recombine(&pairs, &in_sigs, &w_sigs)?;
                for (a, v) in acc.iter_mut().zip(descale(&ints, xin.scale, wblk.scale)) {
                    *a += v;
                }
            }
            Ok((
                Matrix::from_vec(er, ec, acc)?,
                BlockStats {
                    block_row: p,
                    block_col: r,
                    saturated,
                },
            ))
        })
        .collect::<Result<_>>()?;

    let mut result = Matrix::zeros(x.rows(), n);
    let mut block_stats = Vec::with_capacity(outputs.len());
    for ((p, r), (block, stats)) in tasks.iter().zip(outputs) {
        result.set_window(p * ar, r * cfg.crossbar.cols, &block);
        block_stats.push(stats);
    }
    Ok(MatmulReport {
        result,
        relative_error: None,
        block_stats,
        iterations: programmed.iterations,
        converged: programmed.converged,
        cycle: programmed.cycle,
    })
}

/// Programs `w` for `cycle` and multiplies; reports the error against the exact product.
pub fn dpe_matmul(x: &Matrix, w: &Matrix, cfg: &EngineConfig, cycle: u64) -> Result<MatmulReport> {
    let programmed = program_weights(w, cfg, cycle)?;
    let report = matmul(x, &programmed, cfg)?;
    let ideal = matmul_exact(x, w)?;
    if ideal.frobenius_norm() > 0.0 {
        report.with_reference(&ideal)
    } else {
        Ok(report)
    }
}

/// `‖sim − ideal‖_F / ‖ideal‖_F`.
pub fn relative_error(sim: &Matrix, ideal: &Matrix) -> Result<f64> {
    if sim.shape() != ideal.shape() {
        return Err(Error::dims(
            "relative_error",
            format!("{:?} vs {:?}", sim.shape(), ideal.shape()),
        ));
    }
    let den = ideal.frobenius_norm();
    if den == 0.0 {
        return Err(Error::Degenerate("reference has zero norm".into()));
    }
    Ok(sim.sub(ideal)?.frobenius_norm() / den)
}
