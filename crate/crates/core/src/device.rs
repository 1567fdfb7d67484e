//! Statistical model of a multi-level memristive cell.
//!
//! Digital level codes map linearly onto `[lgs, hgs]`. Programming a cell
//! draws its conductance from a lognormal distribution whose mean is the
//! ideal conductance and whose coefficient of variation is `cv`; this one
//! draw stands for device-to-device and cycle-to-cycle variation together.
//!
//! The lognormal location is `mu = ln(E[G]) - sigma^2 / 2`. Writing it with
//! `sigma / 2` instead would bias the generated mean away from the target.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

/// Relative slack when checking that ideal conductances are programmable.
const RANGE_SLACK: f64 = 1e-9;

/// Conductance range, level count and variability of a memristive cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceModel {
    /// Highest programmable conductance (S).
    pub hgs: f64,
    /// Lowest programmable conductance (S).
    pub lgs: f64,
    /// Number of programmable states.
    pub g_levels: u32,
    /// Coefficient of variation of the programmed conductance.
    pub cv: f64,
}

impl Default for DeviceModel {
    fn default() -> Self {
        Self {
            hgs: 1e-5,
            lgs: 1e-7,
            g_levels: 16,
            cv: 0.05,
        }
    }
}

impl DeviceModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.lgs > 0.0 && self.lgs.is_finite()) {
            return Err(Error::param("lgs", format!("must be > 0, got {}", self.lgs)));
        }
        if !(self.hgs > self.lgs && self.hgs.is_finite()) {
            return Err(Error::param("hgs", format!("must exceed lgs ({}), got {}", self.lgs, self.hgs)));
        }
        if self.g_levels < 2 {
            return Err(Error::param("g_levels", format!("must be >= 2, got {}", self.g_levels)));
        }
        if !(self.cv >= 0.0 && self.cv.is_finite()) {
            return Err(Error::param("cv", format!("must be >= 0, got {}", self.cv)));
        }
        Ok(())
    }

    /// Conductance increment between adjacent levels.
    #[inline]
    pub fn level_step(&self) -> f64 {
        (self.hgs - self.lgs) / f64::from(self.g_levels - 1)
    }

    pub fn with_cv(mut self, cv: f64) -> Self {
        self.cv = cv;
        self
    }

    /// Bounds applied to sampled conductances.
    pub fn clip_range(&self) -> (f64, f64) {
        (self.lgs / 10.0, self.hgs * 10.0)
    }
}

/// Parameters of the lognormal conductance distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LognormalParams {
    pub sigma: f64,
    pub mu: f64,
}

/// Lognormal `(sigma, mu)` giving mean `target_mean` and coefficient of
/// variation `cv`.
pub fn lognormal_params(target_mean: f64, cv: f64) -> Result<LognormalParams> {
    if !(target_mean > 0.0) || !target_mean.is_finite() {
        return Err(Error::param("target_mean", format!("must be > 0, got {target_mean}")));
    }
    if !(cv >= 0.0) || !cv.is_finite() {
        return Err(Error::param("cv", format!("must be >= 0, got {cv}")));
    }
    let sigma = (cv * cv + 1.0).ln().sqrt();
    Ok(LognormalParams {
        sigma,
        mu: target_mean.ln() - 0.5 * sigma * sigma,
    })
}

/// Linear level-to-conductance map `lgs + level * (hgs - lgs) / (g_levels - 1)`.
pub fn level_to_conductance(level: u32, model: &DeviceModel) -> Result<f64> {
    if level >= model.g_levels {
        return Err(Error::OutOfRange {
            what: "conductance level",
            value: f64::from(level),
            min: 0.0,
            max: f64::from(model.g_levels - 1),
        });
    }
    Ok(model.lgs + f64::from(level) * model.level_step())
}

/// Programs `ideal` with one lognormal variation draw per cell.
///
/// With `cv == 0` the ideal matrix is returned unchanged.
pub fn sample_programmed(ideal: &Matrix, model: &DeviceModel, rng: &mut SeededRng) -> Result<Matrix> {
    let mut out = ideal.clone();
    sample_in_place(out.data_mut(), model, rng)?;
    Ok(out)
}

pub(crate) fn sample_in_place(values: &mut [f64], model: &DeviceModel, rng: &mut SeededRng) -> Result<()> {
    let lo = model.lgs * (1.0 - RANGE_SLACK);
    let hi = model.hgs * (1.0 + RANGE_SLACK);
    if let Some(&bad) = values.iter().find(|&&g| !(g >= lo && g <= hi)) {
        return Err(Error::OutOfRange {
            what: "ideal conductance",
            value: bad,
            min: model.lgs,
            max: model.hgs,
        });
    }
    if model.cv == 0.0 {
        return Ok(());
    }
    let sigma = (model.cv * model.cv + 1.0).ln().sqrt();
    let shift = -0.5 * sigma * sigma;
    let (clip_lo, clip_hi) = model.clip_range();
    for g in values.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *g = (*g * (shift + sigma * z).exp()).clamp(clip_lo, clip_hi);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Purpose, StreamId};

    fn rng(seed: u64) -> SeededRng {
        SeededRng::new(seed, StreamId::new(Purpose::Test))
    }

    fn mean_and_cv(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var.sqrt() / mean)
    }

    #[test]
    fn zero_cv_is_deterministic() {
        let p = lognormal_params(3e-6, 0.0).unwrap();
        assert_eq!(p.sigma, 0.0);
        assert_eq!(p.mu, 3e-6f64.ln());
        let model = DeviceModel::default().with_cv(0.0);
        let ideal = Matrix::filled(4, 4, 5e-6);
        assert_eq!(sample_programmed(&ideal, &model, &mut rng(1)).unwrap(), ideal);
    }

    #[test]
    fn closed_form_params() {
        let p = lognormal_params(1e-5, 0.05).unwrap();
        let sigma = 1.0025f64.ln().sqrt();
        assert!((p.sigma - sigma).abs() <= 1e-15);
        assert!((p.mu - (1e-5f64.ln() - sigma * sigma / 2.0)).abs() <= 1e-12);
        // Lognormal mean exp(mu + sigma^2/2) reproduces the target.
        assert!(((p.mu + p.sigma * p.sigma / 2.0).exp() / 1e-5 - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rejects_non_positive_mean() {
        assert!(lognormal_params(0.0, 0.1).is_err());
        assert!(lognormal_params(-1.0, 0.1).is_err());
    }

    #[test]
    fn sampling_oracle_high_cv() {
        let model = DeviceModel {
            cv: 0.3,
            ..DeviceModel::default()
        };
        let mut xs = vec![1e-5; 1_000_000];
        sample_in_place(&mut xs, &model, &mut rng(2)).unwrap();
        let (mean, cv) = mean_and_cv(&xs);
        assert!((mean / 1e-5 - 1.0).abs() < 0.005, "mean {mean}");
        assert!((cv / 0.3 - 1.0).abs() < 0.02, "cv {cv}");
    }

    #[test]
    fn table_parameter_endpoints() {
        let m = DeviceModel::default();
        assert_eq!(level_to_conductance(0, &m).unwrap(), 1e-7);
        assert!((level_to_conductance(15, &m).unwrap() - 1e-5).abs() <= 1e-20);
        let g7 = level_to_conductance(7, &m).unwrap();
        assert!((g7 - (1e-7 + 7.0 * 9.9e-6 / 15.0)).abs() <= 1e-20);
        assert!(level_to_conductance(16, &m).is_err());
    }

    #[test]
    fn levels_strictly_increasing() {
        for g_levels in [2, 4, 16, 256] {
            let m = DeviceModel {
                g_levels,
                ..DeviceModel::default()
            };
            let gs: Vec<f64> = (0..g_levels).map(|l| level_to_conductance(l, &m).unwrap()).collect();
            assert!(gs.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn rejects_out_of_range_ideal() {
        let m = DeviceModel::default();
        let ideal = Matrix::filled(2, 2, 2e-5);
        assert!(matches!(
            sample_programmed(&ideal, &m, &mut rng(3)),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn shape_preserved_and_deterministic() {
        let m = DeviceModel::default();
        let ideal = Matrix::from_fn(5, 3, |i, j| 1e-7 + (i + j) as f64 * 1e-6);
        let a = sample_programmed(&ideal, &m, &mut rng(4)).unwrap();
        let b = sample_programmed(&ideal, &m, &mut rng(4)).unwrap();
        assert_eq!(a.shape(), ideal.shape());
        assert_eq!(a, b);
        assert_ne!(a, ideal);
    }

    #[test]
    fn pooled_cv_over_cycles() {
        let m = DeviceModel::default();
        let ideal = Matrix::filled(64, 64, 1e-5);
        let mut pooled = Vec::with_capacity(64 * 64 * 100);
        for cycle in 0..100 {
            let mut r = SeededRng::new(5, StreamId::new(Purpose::Program).cycle(cycle));
            pooled.extend_from_slice(sample_programmed(&ideal, &m, &mut r).unwrap().data());
        }
        let (_, cv) = mean_and_cv(&pooled);
        assert!((cv / 0.05 - 1.0).abs() < 0.05, "pooled cv {cv}");
    }

    #[test]
    fn sample_mean_converges_like_inverse_sqrt_n() {
        let m = DeviceModel::default();
        for (n, seed) in [(10_000usize, 6), (1_000_000, 7)] {
            let mut xs = vec![1e-5; n];
            sample_in_place(&mut xs, &m, &mut rng(seed)).unwrap();
            let (mean, _) = mean_and_cv(&xs);
            let standard_error = 0.05 / (n as f64).sqrt();
            assert!((mean / 1e-5 - 1.0).abs() < 5.0 * standard_error, "n = {n}, mean {mean}");
        }
    }

    #[test]
    fn log_histogram_unimodal_per_state() {
        let m = DeviceModel::default();
        for (state, seed) in [(m.lgs, 8), (m.hgs, 9)] {
            let mut xs = vec![state; 200_000];
            sample_in_place(&mut xs, &m, &mut rng(seed)).unwrap();
            let logs: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
            let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let bins = 25;
            let mut hist = vec![0usize; bins];
            for l in &logs {
                let b = (((l - lo) / (hi - lo)) * bins as f64) as usize;
                hist[b.min(bins - 1)] += 1;
            }
            let peak = *hist.iter().max().unwrap();
            let significant: Vec<usize> = hist.into_iter().filter(|&c| c * 100 >= peak).collect();
            let peak_at = significant.iter().position(|&c| c == peak).unwrap();
            assert!(significant[..=peak_at].windows(2).all(|w| w[1] >= w[0]));
            assert!(significant[peak_at..].windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
