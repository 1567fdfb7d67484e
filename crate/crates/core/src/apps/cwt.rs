use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dpe::{dpe_matmul, EngineConfig};
use crate::error::{Error, Result};
use crate::numerics::{matmul_exact, Matrix};

/// Morlet wavelets sampled on a common odd-length grid, one row per scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorletKernelBank {
    pub scales: Vec<f64>,
    pub omega0: f64,
    pub length: usize,
    pub real: Matrix,
    pub imag: Matrix,
}

/// Unnormalized Morlet wavelet `π^(-1/4) e^{iω₀t} e^{-t²/2}` as `(re, im)`.
pub fn morlet(t: f64, omega0: f64) -> (f64, f64) {
    let env = PI.powf(-0.25) * (-0.5 * t * t).exp();
    (env * (omega0 * t).cos(), env * (omega0 * t).sin())
}

/// `steps` scales spaced geometrically from `lo` to `hi`.
pub fn log_scales(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => vec![],
        1 => vec![lo],
        _ => (0..steps)
            .map(|i| lo * (hi / lo).powf(i as f64 / (steps - 1) as f64))
            .collect(),
    }
}

impl MorletKernelBank {
    /// Kernels are truncated at ±4 scale units and each complex row is scaled to unit L2 norm.
    pub fn new(scales: &[f64], omega0: f64) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::param("scales", "at least one scale is required"));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::param("scales", "must be positive"));
        }
        let s_max = scales.iter().copied().fold(0.0, f64::max);
        let half = (4.0 * s_max).ceil() as usize;
        let length = 2 * half + 1;
        let mut real = Matrix::zeros(scales.len(), length);
        let mut imag = Matrix::zeros(scales.len(), length);
        for (r, &s) in scales.iter().enumerate() {
            for j in 0..length {
                let t = (j as f64 - half as f64) / s;
                if t.abs() <= 4.0 {
                    let (re, im) = morlet(t, omega0);
                    real[(r, j)] = re;
                    imag[(r, j)] = im;
                }
            }
            let norm = (real.row(r).iter().chain(imag.row(r)).map(|v| v * v).sum::<f64>()).sqrt();
            real.row_mut(r).iter_mut().for_each(|v| *v /= norm);
            imag.row_mut(r).iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self {
            scales: scales.to_vec(),
            omega0,
            length,
            real,
            imag,
        })
    }

    /// Peak frequency of each scale in cycles per sample.
    pub fn frequencies(&self) -> Vec<f64> {
        self.scales.iter().map(|s| self.omega0 / (2.0 * PI * s)).collect()
    }
}

/// Sliding windows of the zero-padded signal, one row per output time step.
pub fn signal_windows(signal: &[f64], length: usize) -> Result<Matrix> {
    if length > signal.len() {
        return Err(Error::dims(
            "cwt",
            format!("kernel length {length} exceeds signal length {}", signal.len()),
        ));
    }
    let half = length / 2;
    Ok(Matrix::from_fn(signal.len(), length, |t, j| {
        (t + j).checked_sub(half).and_then(|i| signal.get(i)).copied().unwrap_or(0.0)
    }))
}

fn power(re: &Matrix, im: &Matrix) -> Matrix {
    // Products are time x scale; the spectrum is scale x time.
    Matrix::from_fn(re.cols(), re.rows(), |s, t| re[(t, s)].powi(2) + im[(t, s)].powi(2))
}

/// Full-precision power spectrum, `scales x time`.
pub fn cwt_exact(signal: &[f64], bank: &MorletKernelBank) -> Result<Matrix> {
    let x = signal_windows(signal, bank.length)?;
    Ok(power(
        &matmul_exact(&x, &bank.real.transpose())?,
        &matmul_exact(&x, &bank.imag.transpose())?,
    ))
}

/// Power spectrum with the real and imaginary kernel matrices on separate crossbars.
pub fn cwt_hw(signal: &[f64], bank: &MorletKernelBank, engine: &EngineConfig) -> Result<Matrix> {
    let x = signal_windows(signal, bank.length)?;
    let re = dpe_matmul(&x, &bank.real.transpose(), engine, 0)?.result;
    let im = dpe_matmul(&x, &bank.imag.transpose(), engine, 1)?.result;
    Ok(power(&re, &im))
}

/// Pearson correlation of two equally sized matrices.
pub fn normalized_correlation(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dims("correlation", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.data().len() as f64;
    let (ma, mb) = (a.data().iter().sum::<f64>() / n, b.data().iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("correlation of a constant spectrum".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Linear chirp plus a second, weaker chirp one octave higher.
///
/// The primary component sweeps `f0 → f1` cycles per sample over `n` samples.
pub fn two_tone_chirp(n: usize, f0: f64, f1: f64) -> Vec<f64> {
    let phase = |t: f64, a: f64, b: f64| 2.0 * PI * (a * t + 0.5 * (b - a) * t * t / n as f64);
    (0..n)
        .map(|i| {
            let t = i as f64;
            phase(t, f0, f1).sin() + 0.5 * phase(t, 2.0 * f0, 2.0 * f1).sin()
        })
        .collect()
}

/// Instantaneous frequency of the primary chirp component at sample `t`.
pub fn chirp_frequency(n: usize, f0: f64, f1: f64, t: usize) -> f64 {
    f0 + (f1 - f0) * t as f64 / n as f64
}
