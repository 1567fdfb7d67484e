use serde::{Deserialize, Serialize};

use crate::dpe::{matmul, program_weights, EngineConfig};
use crate::error::{Error, Result};
use crate::numerics::{conjugate_gradient, solve_dense, CgOutcome, Matrix, Purpose, SeededRng, StreamId};

/// A driven word line: source `drive` feeds node 0 through one wire segment,
/// consecutive nodes are joined by segments of `r_wire`, and every node leaks
/// to ground through its device conductance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordLineCircuit {
    pub r_wire: f64,
    pub conductances: Vec<f64>,
    pub drive: f64,
}

impl WordLineCircuit {
    /// `n` nodes with conductances drawn uniformly from `[g_min, g_max]`.
    pub fn random(n: usize, r_wire: f64, g_min: f64, g_max: f64, drive: f64, seed: u64) -> Self {
        let mut r = SeededRng::new(seed, StreamId::new(Purpose::Operands).block(7, 0));
        Self {
            r_wire,
            conductances: (0..n).map(|_| r.uniform(g_min, g_max)).collect(),
            drive,
        }
    }

    /// Word line with the wire resistance of a typical crossbar and leakage
    /// loads between 0.1 and 1 times the segment conductance.
    pub fn desk(n: usize, seed: u64) -> Self {
        const R_WIRE: f64 = 2.93;
        Self::random(n, R_WIRE, 0.1 / R_WIRE, 1.0 / R_WIRE, 1.0, seed)
    }

    pub fn nodes(&self) -> usize {
        self.conductances.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes() < 2 {
            return Err(Error::param("nodes", "need at least 2 nodes"));
        }
        if !(self.r_wire.is_finite() && self.r_wire > 0.0) {
            return Err(Error::param("r_wire", "must be positive"));
        }
        if self.conductances.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::param("conductances", "must be finite and non-negative"));
        }
        if !self.drive.is_finite() {
            return Err(Error::NonFinite { context: "drive voltage" });
        }
        Ok(())
    }
}

/// Nodal equations `A · V = b` of the word line; `A` is tridiagonal and SPD.
pub fn build_wordline_system(c: &WordLineCircuit) -> Result<(Matrix, Vec<f64>)> {
    c.validate()?;
    let n = c.nodes();
    let y = 1.0 / c.r_wire;
    let mut a = Matrix::zeros(n, n);
    for k in 0..n {
        let neighbours = if k + 1 < n { 2.0 } else { 1.0 };
        a[(k, k)] = neighbours * y + c.conductances[k];
        if k + 1 < n {
            a[(k, k + 1)] = -y;
            a[(k + 1, k)] = -y;
        }
    }
    let mut b = vec![0.0; n];
    b[0] = c.drive * y;
    Ok((a, b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgRun {
    pub voltages: Vec<f64>,
    /// Relative residual after each iteration, as seen by the solver.
    pub history: Vec<f64>,
    pub converged: bool,
    pub breakdown: bool,
}

impl From<CgOutcome> for CgRun {
    fn from(o: CgOutcome) -> Self {
        Self {
            voltages: o.x,
            history: o.history,
            converged: o.converged,
            breakdown: o.breakdown,
        }
    }
}

impl CgRun {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitReport {
    pub hardware: CgRun,
    pub software: CgRun,
    /// Direct dense solution.
    pub reference: Vec<f64>,
    /// RMS deviation of the hardware voltages from the reference, relative to the reference RMS.
    pub hardware_rms_error: f64,
    /// `‖b − A·v_hw‖ / ‖b‖` with the exact matrix.
    pub hardware_true_residual: f64,
}

pub fn relative_rms(x: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = x.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = reference.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

/// Solves the word-line equations with conjugate gradient twice: once with
/// every matrix-vector product computed on the crossbar model (the matrix is
/// programmed once), once in software.
pub fn solve_circuit_hw(c: &WordLineCircuit, engine: &EngineConfig, tol: f64, max_iter: usize) -> Result<CircuitReport> {
    engine.validate()?;
    if !engine.weight_scheme.is_fp() || !engine.input_scheme.is_fp() {
        return Err(Error::Incompatible("circuit solving expects floating-point pre-alignment schemes".into()));
    }
    let (a, b) = build_wordline_system(c)?;
    let programmed = program_weights(&a, engine, 0)?;
    let hardware = conjugate_gradient(
        |p| Ok(matmul(&Matrix::row_vector(p), &programmed, engine)?.result.into_vec()),
        &b,
        tol,
        max_iter,
    )?;
    let software = conjugate_gradient(|p| a.matvec(p), &b, tol, max_iter)?;
    let reference = solve_dense(&a, &b)?;
    let ax = a.matvec(&hardware.x)?;
    let res: f64 = ax.iter().zip(&b).map(|(l, r)| (l - r) * (l - r)).sum::<f64>().sqrt();
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(CircuitReport {
        hardware_rms_error: relative_rms(&hardware.x, &reference),
        hardware_true_residual: res / b_norm,
        hardware: hardware.into(),
        software: software.into(),
        reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpe::NoiseMode;
    use crate::numerics::cholesky;
    use crate::slicing::SliceScheme;

    fn fp32_engine() -> EngineConfig {
        let mut e = EngineConfig::default().with_schemes(SliceScheme::preset("fp32").unwrap());
        e.crossbar = e.crossbar.with_size(32, 32);
        e
    }

    #[test]
    fn two_node_divider_matches_hand_algebra() {
        // Unit wire, g = (1, 1): V0 = 2/5, V1 = 1/5 for a 1 V drive.
        let c = WordLineCircuit {
            r_wire: 1.0,
            conductances: vec![1.0, 1.0],
            drive: 1.0,
        };
        let (a, b) = build_wordline_system(&c).unwrap();
        assert_eq!(a, Matrix::from_rows(&[[3.0, -1.0], [-1.0, 2.0]]).unwrap());
        let v = solve_dense(&a, &b).unwrap();
        assert!((v[0] - 0.4).abs() < 1e-12 && (v[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn no_leakage_means_no_drop() {
        let c = WordLineCircuit {
            r_wire: 2.93,
            conductances: vec![0.0; 10],
            drive: 0.2,
        };
        let (a, b) = build_wordline_system(&c).unwrap();
        for v in solve_dense(&a, &b).unwrap() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn system_is_spd_for_random_parameters() {
        let mut r = SeededRng::new(4, StreamId::new(Purpose::Test));
        for i in 0..100 {
            let n = 2 + r.index(30);
            let c = WordLineCircuit::random(n, r.uniform(0.1, 10.0), 0.0, r.uniform(1e-6, 1.0), 1.0, i);
            let (a, _) = build_wordline_system(&c).unwrap();
            assert_eq!(a, a.transpose());
            cholesky(&a).unwrap();
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut c = WordLineCircuit::random(4, 1.0, 0.1, 0.2, 1.0, 0);
        c.r_wire = 0.0;
        assert!(build_wordline_system(&c).is_err());
        c.r_wire = 1.0;
        c.conductances[1] = -1.0;
        assert!(build_wordline_system(&c).is_err());
        c.conductances.truncate(1);
        assert!(build_wordline_system(&c).is_err());
        assert!(solve_circuit_hw(&WordLineCircuit::random(4, 1.0, 0.1, 0.2, 1.0, 0), &EngineConfig::default(), 1e-3, 50).is_err());
    }

    #[test]
    fn ideal_engine_tracks_software_history() {
        let c = WordLineCircuit::desk(64, 1);
        let mut e = fp32_engine();
        e.noise_mode = NoiseMode::Ideal;
        e.crossbar = e.crossbar.with_ideal_converters();
        let rep = solve_circuit_hw(&c, &e, 1e-3, 200).unwrap();
        assert!(rep.hardware.converged && rep.software.converged);
        for (h, s) in rep.hardware.history.iter().zip(&rep.software.history) {
            assert!((h / s - 1.0).abs() < 0.1, "{h} vs {s}");
        }
    }

    #[test]
    fn noisy_engine_stays_consistent() {
        let c = WordLineCircuit::desk(64, 2);
        let rep = solve_circuit_hw(&c, &fp32_engine(), 1e-3, 500).unwrap();
        assert!(rep.hardware.converged, "{:?}", rep.hardware.history);
        assert!(rep.hardware.iterations() >= rep.software.iterations());
        assert!(rep.hardware_rms_error < 0.1, "{}", rep.hardware_rms_error);
        assert!(rep.software.converged);
    }
}
