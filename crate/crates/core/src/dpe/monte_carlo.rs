use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{matmul, program_weights, relative_error, EngineConfig};
use crate::error::{Error, Result};
use crate::numerics::{matmul_exact, Matrix};
use crate::slicing::SliceScheme;

/// Parameter grid swept by [`monte_carlo`]; every combination is one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McGrid {
    pub cvs: Vec<f64>,
    /// Square array sizes; also the block size of the decomposition.
    pub block_sizes: Vec<usize>,
    /// Applied to both operands.
    pub schemes: Vec<SliceScheme>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub cv: f64,
    pub block: usize,
    pub scheme: String,
    pub path: String,
    pub cycle: u64,
    pub re: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub cv: f64,
    pub block: usize,
    pub scheme: String,
    pub path: String,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct McTable {
    pub records: Vec<McRecord>,
}

fn path_name(scheme: &SliceScheme) -> &'static str {
    if scheme.is_fp() {
        "pre-alignment"
    } else {
        "quantization"
    }
}

/// Linear-interpolation quantile of sorted data, `p` in `[0, 1]`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl McTable {
    /// CSV with header `cv,block,scheme,path,cycle,re`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cv,block,scheme,path,cycle,re\n");
        for r in &self.records {
            writeln!(out, "{},{},\"{}\",{},{},{}", r.cv, r.block, r.scheme, r.path, r.cycle, r.re).unwrap();
        }
        out
    }

    /// Median and quartiles per grid point, in first-seen order.
    pub fn summary(&self) -> Vec<McSummary> {
        let mut keys: Vec<(f64, usize, String, String)> = Vec::new();
        for r in &self.records {
            let key = (r.cv, r.block, r.scheme.clone(), r.path.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(cv, block, scheme, path)| {
                let mut res: Vec<f64> = self
                    .records
                    .iter()
                    .filter(|r| r.cv == cv && r.block == block && r.scheme == scheme)
                    .map(|r| r.re)
                    .collect();
                res.sort_by(f64::total_cmp);
                McSummary {
                    cv,
                    block,
                    scheme,
                    path,
                    median: quantile(&res, 0.5),
                    q1: quantile(&res, 0.25),
                    q3: quantile(&res, 0.75),
                }
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("cv,block,scheme,path,median,q1,q3\n");
        for s in self.summary() {
            writeln!(out, "{},{},\"{}\",{},{},{},{}", s.cv, s.block, s.scheme, s.path, s.median, s.q1, s.q3).unwrap();
        }
        out
    }

    pub fn median(&self, cv: f64, block: usize, scheme: &SliceScheme) -> Option<f64> {
        let name = scheme.to_string();
        self.summary()
            .into_iter()
            .find(|s| s.cv == cv && s.block == block && s.scheme == name)
            .map(|s| s.median)
    }
}

/// Runs `cycles` independent program-and-multiply trials of `a · b` per grid point.
///
/// Cycle `c` uses programming streams keyed by `c` at every grid point, so
/// points differ only by their parameters.
pub fn monte_carlo(base: &EngineConfig, grid: &McGrid, a: &Matrix, b: &Matrix, cycles: u64) -> Result<McTable> {
    if cycles == 0 {
        return Err(Error::param("cycles", "must be >= 1"));
    }
    let ideal = matmul_exact(a, b)?;
    let mut table = McTable::default();
    for scheme in &grid.schemes {
        for &block in &grid.block_sizes {
            for &cv in &grid.cvs {
                let mut cfg = base.clone().with_schemes(scheme.clone());
                cfg.device.cv = cv;
                cfg.crossbar = cfg.crossbar.with_size(block, block);
                cfg.validate()?;
                let res: Vec<f64> = (0..cycles)
                    .into_par_iter()
                    .map(|c| {
                        let pw = program_weights(b, &cfg, c)?;
                        relative_error(&matmul(a, &pw, &cfg)?.result, &ideal)
                    })
                    .collect::<Result<_>>()?;
                for (cycle, re) in res.into_iter().enumerate() {
                    table.records.push(McRecord {
                        cv,
                        block,
                        scheme: scheme.to_string(),
                        path: path_name(scheme).to_string(),
                        cycle: cycle as u64,
                        re,
                    });
                }
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpe::NoiseMode;
    use crate::numerics::{Purpose, SeededRng, StreamId};

    fn operands(n: usize) -> (Matrix, Matrix) {
        let mut r = SeededRng::new(1, StreamId::new(Purpose::Operands));
        let a = Matrix::from_fn(n, n, |_, _| r.uniform(-1.0, 1.0));
        let b = Matrix::from_fn(n, n, |_, _| r.uniform(-1.0, 1.0));
        (a, b)
    }

    #[test]
    fn quantile_interpolates() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&xs, 0.5), 2.5);
        assert_eq!(quantile(&xs, 0.0), 1.0);
        assert_eq!(quantile(&xs, 1.0), 4.0);
        assert!((quantile(&xs, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn ideal_mode_has_zero_spread() {
        let base = EngineConfig {
            noise_mode: NoiseMode::Ideal,
            ..EngineConfig::default()
        };
        let grid = McGrid {
            cvs: vec![0.0],
            block_sizes: vec![32],
            schemes: vec![SliceScheme::preset("int8").unwrap()],
        };
        let (a, b) = operands(64);
        let t = monte_carlo(&base, &grid, &a, &b, 5).unwrap();
        let first = t.records[0].re;
        assert!(first > 0.0);
        assert!(t.records.iter().all(|r| r.re == first));
        let s = &t.summary()[0];
        assert_eq!((s.q1, s.median, s.q3), (first, first, first));
    }

    #[test]
    fn medians_grow_with_variation() {
        let grid = McGrid {
            cvs: vec![0.0, 0.02, 0.05, 0.1, 0.2],
            block_sizes: vec![32],
            schemes: vec![SliceScheme::preset("int8").unwrap()],
        };
        let (a, b) = operands(64);
        let t = monte_carlo(&EngineConfig::default(), &grid, &a, &b, 10).unwrap();
        let medians: Vec<f64> = t.summary().iter().map(|s| s.median).collect();
        assert!(medians.windows(2).all(|w| w[1] >= w[0]), "{medians:?}");
    }

    #[test]
    fn csv_header_and_rows() {
        let grid = McGrid {
            cvs: vec![0.05],
            block_sizes: vec![16],
            schemes: vec![SliceScheme::preset("fp16").unwrap()],
        };
        let (a, b) = operands(16);
        let t = monte_carlo(&EngineConfig::default(), &grid, &a, &b, 3).unwrap();
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "cv,block,scheme,path,cycle,re");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0.05,16,\"fp:16:1,1,2,4,4\",pre-alignment,0,"));
        assert!(monte_carlo(&EngineConfig::default(), &grid, &a, &b, 0).is_err());
    }
}
