//! Resistive crossbar array: ideal dot product, IR-drop aware DC solve and
//! converter models.
//!
//! Topology: word line `i` is driven at its left end through one wire
//! segment; word-line nodes `(i, j)` and `(i, j + 1)` are joined by one
//! segment. Bit line `j` runs top to bottom and its bottom node reaches a
//! virtual-ground sense amplifier through one more segment. The cell at
//! `(i, j)` connects word-line node `(i, j)` to bit-line node `(i, j)`.
//! Only the DC steady state is modelled.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{thomas_in_place, Matrix, SymBandMatrix};

/// Largest DAC/ADC level count accepted; used for "ideal" converters.
pub const MAX_CONVERTER_LEVELS: u64 = 1 << 32;

/// Sweeps with at least this many nodes are spread over the thread pool.
const PARALLEL_NODES: usize = 128 * 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdcRangeMode {
    /// Full scale fixed at `v_read * hgs * rows`.
    #[default]
    WorstCase,
    /// Full scale set to the largest current seen in the conversion batch.
    Dynamic,
}

impl AdcRangeMode {
    pub fn full_scale(self, cfg: &CrossbarConfig, hgs: f64, currents: impl IntoIterator<Item = f64>) -> f64 {
        match self {
            AdcRangeMode::WorstCase => cfg.v_read * hgs * cfg.rows as f64,
            AdcRangeMode::Dynamic => currents.into_iter().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossbarConfig {
    pub rows: usize,
    pub cols: usize,
    /// Resistance of one wire segment (ohm).
    pub r_wire: f64,
    /// Full-scale read voltage (V).
    pub v_read: f64,
    pub rdac: u64,
    pub radc: u64,
    pub adc_range_mode: AdcRangeMode,
    /// Carried for completeness; the DC solve does not use it.
    pub parasitic_capacitance: f64,
}

impl Default for CrossbarConfig {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            r_wire: 2.93,
            v_read: 0.2,
            rdac: 256,
            radc: 1024,
            adc_range_mode: AdcRangeMode::WorstCase,
            parasitic_capacitance: 0.0,
        }
    }
}

impl CrossbarConfig {
    pub fn with_size(mut self, rows: usize, cols: usize) -> Self {
        self.rows = rows;
        self.cols = cols;
        self
    }

    /// Both converters at [`MAX_CONVERTER_LEVELS`].
    pub fn with_ideal_converters(mut self) -> Self {
        self.rdac = MAX_CONVERTER_LEVELS;
        self.radc = MAX_CONVERTER_LEVELS;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::param("array_size", format!("must be >= 1, got {}x{}", self.rows, self.cols)));
        }
        if !(self.r_wire >= 0.0 && self.r_wire.is_finite()) {
            return Err(Error::param("r_wire", format!("must be >= 0, got {}", self.r_wire)));
        }
        if !(self.v_read > 0.0 && self.v_read.is_finite()) {
            return Err(Error::param("v_read", format!("must be > 0, got {}", self.v_read)));
        }
        for (name, levels) in [("rdac", self.rdac), ("radc", self.radc)] {
            if !(2..=MAX_CONVERTER_LEVELS).contains(&levels) {
                return Err(Error::param(
                    name,
                    format!("must be in 2..={MAX_CONVERTER_LEVELS}, got {levels}"),
                ));
            }
        }
        Ok(())
    }
}

/// Steady-state node voltages of both line grids, each `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeVoltages {
    pub wordline: Matrix,
    pub bitline: Matrix,
}

fn check_array(v_in: &[f64], g: &Matrix, op: &'static str) -> Result<()> {
    if v_in.len() != g.rows() {
        return Err(Error::dims(
            op,
            format!("{} inputs for a {}x{} array", v_in.len(), g.rows(), g.cols()),
        ));
    }
    Ok(())
}

/// Ideal Ohm/Kirchhoff dot product: `i[j] = sum_i v[i] * g[i][j]`.
pub fn solve_ideal(v_in: &[f64], g: &Matrix) -> Result<Vec<f64>> {
    check_array(v_in, g, "solve_ideal")?;
    let mut out = vec![0.0; g.cols()];
    for (i, &v) in v_in.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        for (o, &gij) in out.iter_mut().zip(g.row(i)) {
            *o += v * gij;
        }
    }
    Ok(out)
}

/// Assembled nodal system of the resistive grid.
///
/// Unknown `2 * (i * cols + j)` is word-line node `(i, j)`, the next index is
/// bit-line node `(i, j)`, giving a symmetric band matrix of half-width
/// `2 * cols`.
#[derive(Debug, Clone)]
pub struct KclSystem {
    pub rows: usize,
    pub cols: usize,
    pub r_wire: f64,
    pub matrix: SymBandMatrix,
    pub rhs: Vec<f64>,
    conductances: Matrix,
    v_in: Vec<f64>,
}

impl KclSystem {
    #[inline]
    pub fn wl_index(&self, i: usize, j: usize) -> usize {
        2 * (i * self.cols + j)
    }

    #[inline]
    pub fn bl_index(&self, i: usize, j: usize) -> usize {
        2 * (i * self.cols + j) + 1
    }

    pub fn unknowns(&self) -> usize {
        2 * self.rows * self.cols
    }

    pub fn to_dense(&self) -> Matrix {
        self.matrix.to_dense()
    }

    /// Splits a flat solution vector into the two node grids.
    pub fn unpack(&self, x: &[f64]) -> NodeVoltages {
        let wordline = Matrix::from_fn(self.rows, self.cols, |i, j| x[self.wl_index(i, j)]);
        let bitline = Matrix::from_fn(self.rows, self.cols, |i, j| x[self.bl_index(i, j)]);
        NodeVoltages { wordline, bitline }
    }

    pub fn pack(&self, v: &NodeVoltages) -> Vec<f64> {
        let mut x = vec![0.0; self.unknowns()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                x[self.wl_index(i, j)] = v.wordline[(i, j)];
                x[self.bl_index(i, j)] = v.bitline[(i, j)];
            }
        }
        x
    }

    /// Direct banded Cholesky solve of the full nodal system.
    pub fn solve_direct(&self) -> Result<NodeVoltages> {
        Ok(self.unpack(&self.matrix.solve_spd(&self.rhs)?))
    }

    /// Currents into the sense nodes for a given voltage state.
    pub fn output_currents(&self, v: &NodeVoltages) -> Vec<f64> {
        let last = self.rows - 1;
        (0..self.cols).map(|j| v.bitline[(last, j)] / self.r_wire).collect()
    }

    /// Largest absolute KCL imbalance (A) over all nodes.
    pub fn max_residual(&self, v: &NodeVoltages) -> f64 {
        let x = self.pack(v);
        let ax = self.matrix.matvec(&x);
        ax.iter().zip(&self.rhs).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn conductances(&self) -> &Matrix {
        &self.conductances
    }

    pub fn inputs(&self) -> &[f64] {
        &self.v_in
    }
}

/// Assembles one KCL equation per word-line and bit-line node.
pub fn build_kcl_system(v_in: &[f64], g: &Matrix, cfg: &CrossbarConfig) -> Result<KclSystem> {
    check_array(v_in, g, "build_kcl_system")?;
    if !(cfg.r_wire > 0.0) {
        return Err(Error::param("r_wire", "nodal system needs r_wire > 0; use solve_ideal"));
    }
    let (rows, cols) = g.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::Degenerate("empty array".into()));
    }
    if let Some(bad) = g.data().iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::Degenerate(format!("conductance {bad} is not a finite non-negative value")));
    }
    let gw = 1.0 / cfg.r_wire;
    let mut sys = KclSystem {
        rows,
        cols,
        r_wire: cfg.r_wire,
        matrix: SymBandMatrix::zeros(2 * rows * cols, 2 * cols),
        rhs: vec![0.0; 2 * rows * cols],
        conductances: g.clone(),
        v_in: v_in.to_vec(),
    };
    for i in 0..rows {
        for j in 0..cols {
            let wl = sys.wl_index(i, j);
            let bl = sys.bl_index(i, j);
            let gij = g[(i, j)];
            // Cell between the two line nodes.
            sys.matrix.add(wl, wl, gij);
            sys.matrix.add(bl, bl, gij);
            sys.matrix.add(bl, wl, -gij);
            // Word-line segment to the left: driver or previous node.
            sys.matrix.add(wl, wl, gw);
            if j == 0 {
                sys.rhs[wl] += gw * v_in[i];
            } else {
                let left = sys.wl_index(i, j - 1);
                sys.matrix.add(left, left, gw);
                sys.matrix.add(wl, left, -gw);
            }
            // Bit-line segment downward: next node or the sense node at 0 V.
            sys.matrix.add(bl, bl, gw);
            if i + 1 < rows {
                let down = sys.bl_index(i + 1, j);
                sys.matrix.add(down, down, gw);
                sys.matrix.add(down, bl, -gw);
            }
        }
    }
    Ok(sys)
}

/// Result of the cross-iteration solve.
#[derive(Debug, Clone)]
pub struct IrDropSolution {
    pub currents: Vec<f64>,
    pub voltages: NodeVoltages,
    pub iterations: usize,
    pub converged: bool,
    /// Max node-voltage change per iteration, normalised by `v_read`.
    pub change_history: Vec<f64>,
}

/// IR-drop aware solve by alternating line relaxation.
///
/// Each iteration first fixes the bit-line voltages and solves every word
/// line as an independent tridiagonal chain, then fixes the word lines and
/// solves every bit line. Iteration stops once the largest node-voltage
/// change divided by `v_read` is at most `tol`, or after `max_iter`
/// iterations with `converged = false`. `r_wire == 0` short-circuits to
/// [`solve_ideal`].
pub fn solve_irdrop(v_in: &[f64], g: &Matrix, cfg: &CrossbarConfig, tol: f64, max_iter: usize) -> Result<IrDropSolution> {
    check_array(v_in, g, "solve_irdrop")?;
    if !(tol > 0.0) {
        return Err(Error::param("tol", "must be > 0"));
    }
    let (rows, cols) = g.shape();
    if cfg.r_wire == 0.0 {
        let currents = solve_ideal(v_in, g)?;
        let wordline = Matrix::from_fn(rows, cols, |i, _| v_in[i]);
        return Ok(IrDropSolution {
            currents,
            voltages: NodeVoltages {
                wordline,
                bitline: Matrix::zeros(rows, cols),
            },
            iterations: 0,
            converged: true,
            change_history: Vec::new(),
        });
    }
    if !(cfg.r_wire > 0.0 && cfg.r_wire.is_finite()) {
        return Err(Error::param("r_wire", format!("must be >= 0, got {}", cfg.r_wire)));
    }
    let gw = 1.0 / cfg.r_wire;
    let gt = g.transpose();
    // Word-line grid row-major (rows x cols); bit-line grid column-major.
    let mut wl: Vec<f64> = (0..rows).flat_map(|i| std::iter::repeat(v_in[i]).take(cols)).collect();
    let mut bl_t = vec![0.0; rows * cols];
    let parallel = rows * cols >= PARALLEL_NODES;

    let wl_off = vec![-gw; cols.saturating_sub(1)];
    let bl_off = vec![-gw; rows.saturating_sub(1)];

    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        let sweep_wl = |i: usize, line: &mut [f64]| -> Result<f64> {
            let mut diag = vec![0.0; cols];
            let mut rhs = vec![0.0; cols];
            let mut scratch = vec![0.0; cols];
            let mut x = vec![0.0; cols];
            for j in 0..cols {
                let gij = g[(i, j)];
                let right = if j + 1 < cols { gw } else { 0.0 };
                diag[j] = gw + right + gij;
                rhs[j] = gij * bl_t[j * rows + i];
            }
            rhs[0] += gw * v_in[i];
            thomas_in_place(&wl_off, &diag, &wl_off, &rhs, &mut scratch, &mut x)?;
            let mut change: f64 = 0.0;
            for (old, new) in line.iter_mut().zip(&x) {
                change = change.max((new - *old).abs());
                *old = *new;
            }
            Ok(change)
        };
        let wl_change = if parallel {
            wl.par_chunks_mut(cols)
                .enumerate()
                .map(|(i, line)| sweep_wl(i, line))
                .collect::<Result<Vec<f64>>>()?
        } else {
            wl.chunks_mut(cols)
                .enumerate()
                .map(|(i, line)| sweep_wl(i, line))
                .collect::<Result<Vec<f64>>>()?
        }
        .into_iter()
        .fold(0.0, f64::max);

        let sweep_bl = |j: usize, line: &mut [f64]| -> Result<f64> {
            let mut diag = vec![0.0; rows];
            let mut rhs = vec![0.0; rows];
            let mut scratch = vec![0.0; rows];
            let mut x = vec![0.0; rows];
            let gcol = gt.row(j);
            for i in 0..rows {
                let up = if i > 0 { gw } else { 0.0 };
                diag[i] = up + gw + gcol[i];
                rhs[i] = gcol[i] * wl[i * cols + j];
            }
            thomas_in_place(&bl_off, &diag, &bl_off, &rhs, &mut scratch, &mut x)?;
            let mut change: f64 = 0.0;
            for (old, new) in line.iter_mut().zip(&x) {
                change = change.max((new - *old).abs());
                *old = *new;
            }
            Ok(change)
        };
        let bl_change = if parallel {
            bl_t.par_chunks_mut(rows)
                .enumerate()
                .map(|(j, line)| sweep_bl(j, line))
                .collect::<Result<Vec<f64>>>()?
        } else {
            bl_t.chunks_mut(rows)
                .enumerate()
                .map(|(j, line)| sweep_bl(j, line))
                .collect::<Result<Vec<f64>>>()?
        }
        .into_iter()
        .fold(0.0, f64::max);

        let change = wl_change.max(bl_change) / cfg.v_read;
        history.push(change);
        if change <= tol {
            converged = true;
            break;
        }
    }

    let wordline = Matrix::from_vec(rows, cols, wl)?;
    let bitline = Matrix::from_fn(rows, cols, |i, j| bl_t[j * rows + i]);
    let currents = (0..cols).map(|j| bl_t[j * rows + rows - 1] * gw).collect();
    Ok(IrDropSolution {
        currents,
        voltages: NodeVoltages { wordline, bitline },
        iterations: history.len(),
        converged,
        change_history: history,
    })
}

/// Linear map from input voltages to output currents under IR-drop.
#[derive(Debug, Clone)]
pub struct Transfer {
    /// `matrix[i][:]` holds the currents per volt applied to word line `i` alone.
    pub matrix: Matrix,
    /// Largest iteration count among the unit solves.
    pub iterations: usize,
    pub converged: bool,
}

/// The grid is a linear resistive network, so `I = Vᵀ · T`; `T` is built
/// from one unit-input solve per word line.
pub fn irdrop_transfer(g: &Matrix, cfg: &CrossbarConfig, tol: f64, max_iter: usize) -> Result<Transfer> {
    let (rows, cols) = g.shape();
    let mut t = Matrix::zeros(rows, cols);
    let mut iterations = 0;
    let mut converged = true;
    let mut v = vec![0.0; rows];
    for i in 0..rows {
        v[i] = cfg.v_read;
        let sol = solve_irdrop(&v, g, cfg, tol, max_iter)?;
        v[i] = 0.0;
        iterations = iterations.max(sol.iterations);
        converged &= sol.converged;
        for (dst, c) in t.row_mut(i).iter_mut().zip(&sol.currents) {
            *dst = c / cfg.v_read;
        }
    }
    Ok(Transfer {
        matrix: t,
        iterations,
        converged,
    })
}

/// Nearest DAC level for a normalised value in `[0, 1]`, as a fraction of full scale.
#[inline]
pub(crate) fn dac_fraction(value: f64, rdac: u64) -> f64 {
    let top = (rdac - 1) as f64;
    (value * top).round() / top
}

/// Rounds normalised inputs to the nearest of `rdac` uniform levels and
/// scales them to volts.
pub fn dac_quantize(values: &[f64], cfg: &CrossbarConfig) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|&v| {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange {
                    what: "DAC input",
                    value: v,
                    min: 0.0,
                    max: 1.0,
                });
            }
            Ok(dac_fraction(v, cfg.rdac) * cfg.v_read)
        })
        .collect()
}

#[inline]
pub(crate) fn adc_code(current: f64, full_scale: f64, radc: u64) -> u64 {
    let top = (radc - 1) as f64;
    ((current.clamp(0.0, full_scale) / full_scale) * top).round() as u64
}

/// Clips currents to `[0, full_scale]` and rounds to the nearest of `radc` codes.
pub fn adc_quantize(currents: &[f64], cfg: &CrossbarConfig, full_scale: f64) -> Result<Vec<u64>> {
    if !(full_scale > 0.0) || !full_scale.is_finite() {
        return Err(Error::param("full_scale", format!("must be > 0, got {full_scale}")));
    }
    Ok(currents.iter().map(|&c| adc_code(c, full_scale, cfg.radc)).collect())
}

/// Current represented by an ADC code.
#[inline]
pub fn adc_decode(code: u64, full_scale: f64, radc: u64) -> f64 {
    code as f64 * full_scale / (radc - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{matmul_exact, solve_dense, Purpose, SeededRng, StreamId};

    fn random_g(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = SeededRng::new(seed, StreamId::new(Purpose::Test));
        Matrix::from_fn(rows, cols, |_, _| r.uniform(1e-7, 1e-5))
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn ideal_single_cell_and_zero_input() {
        let g = Matrix::filled(1, 1, 1e-5);
        let i = solve_ideal(&[0.2], &g).unwrap();
        assert!((i[0] - 2e-6).abs() < 1e-20);
        let g = random_g(4, 3, 1);
        assert_eq!(solve_ideal(&[0.0; 4], &g).unwrap(), vec![0.0; 3]);
        assert!(solve_ideal(&[0.0; 3], &g).is_err());
    }

    #[test]
    fn ideal_matches_matmul() {
        let g = random_g(8, 8, 2);
        let mut r = SeededRng::new(3, StreamId::new(Purpose::Test));
        let v: Vec<f64> = (0..8).map(|_| r.uniform(0.0, 0.2)).collect();
        let ideal = solve_ideal(&v, &g).unwrap();
        let oracle = matmul_exact(&Matrix::row_vector(&v), &g).unwrap();
        for (a, b) in ideal.iter().zip(oracle.data()) {
            assert!((a - b).abs() <= 1e-18);
        }
    }

    #[test]
    fn one_cell_divider_closed_form() {
        let (v, r, g) = (0.2, 2.0, 1e-3);
        let cfg = CrossbarConfig {
            r_wire: r,
            ..CrossbarConfig::default().with_size(1, 1)
        };
        let sys = build_kcl_system(&[v], &Matrix::filled(1, 1, g), &cfg).unwrap();
        let x = solve_dense(&sys.to_dense(), &sys.rhs).unwrap();
        let current = v / (2.0 * r + 1.0 / g);
        assert!((x[0] - (v - current * r)).abs() <= 1e-12);
        assert!((x[1] - current * r).abs() <= 1e-12);
        let nv = sys.unpack(&x);
        assert!((sys.output_currents(&nv)[0] - current).abs() <= 1e-12);
    }

    #[test]
    fn tiny_wire_resistance_recovers_ideal() {
        let g = random_g(2, 2, 4);
        let v = [0.2, 0.1];
        let cfg = CrossbarConfig {
            r_wire: 1e-9,
            ..CrossbarConfig::default().with_size(2, 2)
        };
        let sys = build_kcl_system(&v, &g, &cfg).unwrap();
        let x = solve_dense(&sys.to_dense(), &sys.rhs).unwrap();
        let got = sys.output_currents(&sys.unpack(&x));
        assert!(rel_err(&got, &solve_ideal(&v, &g).unwrap()) <= 1e-6);
    }

    #[test]
    fn band_solve_matches_dense_oracle() {
        let g = random_g(6, 5, 5);
        let v: Vec<f64> = (0..6).map(|i| 0.05 * i as f64).collect();
        let sys = build_kcl_system(&v, &g, &CrossbarConfig::default().with_size(6, 5)).unwrap();
        let dense = solve_dense(&sys.to_dense(), &sys.rhs).unwrap();
        let band = sys.matrix.solve_spd(&sys.rhs).unwrap();
        for (a, b) in dense.iter().zip(&band) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn sinusoidal_input_attenuates_along_word_lines() {
        let cfg = CrossbarConfig::default();
        let g = random_g(64, 64, 6);
        let v: Vec<f64> = (0..64)
            .map(|i| cfg.v_read * (0.6 + 0.4 * (2.0 * std::f64::consts::PI * i as f64 / 16.0).sin()))
            .collect();
        let sys = build_kcl_system(&v, &g, &cfg).unwrap();
        let nv = sys.solve_direct().unwrap();
        for i in 0..64 {
            let row = nv.wordline.row(i);
            assert!(row[0] <= v[i]);
            assert!(row.windows(2).all(|w| w[1] <= w[0]), "row {i} not monotone");
        }
    }

    #[test]
    fn cross_iteration_matches_nodal_oracle() {
        let cfg = CrossbarConfig::default().with_size(16, 16);
        let g = random_g(16, 16, 7);
        let mut r = SeededRng::new(8, StreamId::new(Purpose::Test));
        let v: Vec<f64> = (0..16).map(|_| r.uniform(0.0, cfg.v_read)).collect();
        let sol = solve_irdrop(&v, &g, &cfg, 1e-9, 20).unwrap();
        assert!(sol.converged && sol.iterations <= 20);
        let sys = build_kcl_system(&v, &g, &cfg).unwrap();
        let x = solve_dense(&sys.to_dense(), &sys.rhs).unwrap();
        let oracle = sys.output_currents(&sys.unpack(&x));
        assert!(rel_err(&sol.currents, &oracle) <= 1e-3);
        let ideal = solve_ideal(&v, &g).unwrap();
        assert!(sol.currents.iter().zip(&ideal).all(|(a, b)| a <= b));
    }

    #[test]
    fn zero_wire_resistance_delegates() {
        let cfg = CrossbarConfig {
            r_wire: 0.0,
            ..CrossbarConfig::default().with_size(5, 4)
        };
        let g = random_g(5, 4, 9);
        let v = [0.1, 0.2, 0.0, 0.05, 0.2];
        let sol = solve_irdrop(&v, &g, &cfg, 1e-6, 10).unwrap();
        assert_eq!(sol.currents, solve_ideal(&v, &g).unwrap());
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn change_history_monotone_after_second_iteration() {
        let cfg = CrossbarConfig::default().with_size(32, 32);
        let g = random_g(32, 32, 10);
        let v = vec![cfg.v_read; 32];
        let sol = solve_irdrop(&v, &g, &cfg, 1e-14, 40).unwrap();
        assert!(sol.change_history.len() >= 3);
        assert!(sol.change_history[1..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn currents_approach_ideal_as_wires_vanish() {
        let g = random_g(8, 8, 11);
        let v = vec![0.2; 8];
        let ideal = solve_ideal(&v, &g).unwrap();
        let errs: Vec<f64> = [1.0, 1e-3, 1e-6]
            .iter()
            .map(|&r| {
                let cfg = CrossbarConfig {
                    r_wire: r,
                    ..CrossbarConfig::default().with_size(8, 8)
                };
                rel_err(&solve_irdrop(&v, &g, &cfg, 1e-12, 100).unwrap().currents, &ideal)
            })
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn kcl_residual_bounded_by_tolerance() {
        let cfg = CrossbarConfig::default().with_size(24, 20);
        let g = random_g(24, 20, 12);
        let v: Vec<f64> = (0..24).map(|i| 0.2 * ((i % 5) as f64) / 4.0).collect();
        let hgs = 1e-5;
        for tol in [1e-3, 1e-5, 1e-7] {
            let sol = solve_irdrop(&v, &g, &cfg, tol, 100).unwrap();
            let sys = build_kcl_system(&v, &g, &cfg).unwrap();
            assert!(sys.max_residual(&sol.voltages) <= 10.0 * tol * cfg.v_read * hgs);
        }
    }

    #[test]
    fn transfer_matrix_reproduces_direct_solve() {
        let cfg = CrossbarConfig::default().with_size(8, 6);
        let g = random_g(8, 6, 13);
        let t = irdrop_transfer(&g, &cfg, 1e-12, 100).unwrap().matrix;
        let v: Vec<f64> = (0..8).map(|i| 0.025 * i as f64).collect();
        let via_t = matmul_exact(&Matrix::row_vector(&v), &t).unwrap();
        let direct = solve_irdrop(&v, &g, &cfg, 1e-12, 100).unwrap().currents;
        assert!(rel_err(via_t.data(), &direct) < 1e-9);
    }

    #[test]
    fn dac_endpoints_and_nearest_level() {
        let cfg = CrossbarConfig::default();
        let v = dac_quantize(&[0.0, 1.0, 0.5], &cfg).unwrap();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], cfg.v_read);
        assert!((v[2] - 128.0 / 255.0 * cfg.v_read).abs() < 1e-15);
        assert!(dac_quantize(&[1.01], &cfg).is_err());
        assert!(dac_quantize(&[-0.01], &cfg).is_err());
    }

    #[test]
    fn dac_error_bound_on_grid() {
        let cfg = CrossbarConfig::default();
        let bound = cfg.v_read / (2.0 * (cfg.rdac - 1) as f64);
        let xs: Vec<f64> = (0..10_000).map(|k| k as f64 / 9_999.0).collect();
        let v = dac_quantize(&xs, &cfg).unwrap();
        for (x, q) in xs.iter().zip(&v) {
            assert!((x * cfg.v_read - q).abs() <= bound + 1e-15);
        }
    }

    #[test]
    fn adc_endpoints_and_error_bound() {
        let cfg = CrossbarConfig::default();
        let fs = 1e-5;
        let codes = adc_quantize(&[0.0, fs, 2.0 * fs, -1.0], &cfg, fs).unwrap();
        assert_eq!(codes, vec![0, 1023, 1023, 0]);
        assert!(adc_quantize(&[0.0], &cfg, 0.0).is_err());
        let bound = fs / (2.0 * 1023.0);
        for k in 0..10_000 {
            let c = fs * k as f64 / 9_999.0;
            let code = adc_quantize(&[c], &cfg, fs).unwrap()[0];
            assert!((adc_decode(code, fs, cfg.radc) - c).abs() <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn converters_identity_on_exact_levels() {
        let cfg = CrossbarConfig::default();
        for level in 0..cfg.rdac {
            let frac = level as f64 / (cfg.rdac - 1) as f64;
            assert_eq!(dac_fraction(frac, cfg.rdac), frac);
        }
        let fs = 3e-6;
        for code in 0..cfg.radc {
            assert_eq!(adc_code(adc_decode(code, fs, cfg.radc), fs, cfg.radc), code);
        }
    }

    #[test]
    fn adc_range_modes() {
        let cfg = CrossbarConfig::default();
        let wc = AdcRangeMode::WorstCase.full_scale(&cfg, 1e-5, [1e-6]);
        assert!((wc - 0.2 * 1e-5 * 64.0).abs() < 1e-18);
        let dy = AdcRangeMode::Dynamic.full_scale(&cfg, 1e-5, [1e-6, 3e-6, 2e-6]);
        assert_eq!(dy, 3e-6);
    }
}
