//! Matrix interchange: headerless CSV (one row per line) and the JSON
//! wrapper `{"rows": r, "cols": c, "data": [...]}` in row-major order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::with_capacity(m.rows() * m.cols() * 12);
    for i in 0..m.rows() {
        for (j, v) in m.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Parses headerless CSV; blank lines are skipped, ragged rows rejected.
pub fn matrix_from_csv(text: &str) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: `{}`: {e}", lineno + 1, f.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Matrix> {
    matrix_from_csv(&fs::read_to_string(path)?)
}

pub fn write_csv(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    fs::write(path, matrix_to_csv(m))?;
    Ok(())
}

pub fn read_json(path: impl AsRef<Path>) -> Result<Matrix> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn write_json(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    fs::write(path, serde_json::to_string(m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn csv_layout() {
        let m = Matrix::from_rows(&[[1.0, -2.5], [0.125, 3.0]]).unwrap();
        assert_eq!(matrix_to_csv(&m), "1,-2.5\n0.125,3\n");
    }

    #[test]
    fn ragged_csv_rejected() {
        assert!(matrix_from_csv("1,2\n3\n").is_err());
        assert!(matrix_from_csv("1,x\n").is_err());
    }

    proptest! {
        #[test]
        fn csv_and_json_roundtrip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let mut s = seed;
            let m = Matrix::from_fn(rows, cols, |_, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits((s >> 12) | 0x3FF0_0000_0000_0000) - 1.5
            });
            prop_assert_eq!(&matrix_from_csv(&matrix_to_csv(&m)).unwrap(), &m);
            let json = serde_json::to_string(&m).unwrap();
            prop_assert_eq!(&serde_json::from_str::<Matrix>(&json).unwrap(), &m);
        }
    }
}
