use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dpe::{dpe_matmul, EngineConfig};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Purpose, SeededRng, StreamId};

/// How many centres move per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CenterUpdate {
    /// Every centre is recomputed each iteration.
    #[default]
    All,
    /// One centre per iteration, cycling through them in order.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iter: usize,
    /// Copies of the constant tail appended to each augmented vector.
    pub tail: usize,
    pub update: CenterUpdate,
    pub seed: u64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: 3,
            max_iter: 100,
            tail: 10,
            update: CenterUpdate::All,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansState {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    pub tail: usize,
    pub converged: bool,
    /// Sum of squared distances after each iteration.
    pub sse_history: Vec<f64>,
}

/// `[x, -1/2 × tail]` per row.
pub fn augment_points(x: &Matrix, tail: usize) -> Matrix {
    let d = x.cols();
    Matrix::from_fn(x.rows(), d + tail, |i, j| if j < d { x[(i, j)] } else { -0.5 })
}

/// `[y, ‖y‖²/tail × tail]` per row.
pub fn augment_centers(y: &Matrix, tail: usize) -> Matrix {
    let d = y.cols();
    Matrix::from_fn(y.rows(), d + tail, |i, j| {
        if j < d {
            y[(i, j)]
        } else {
            y.row(i).iter().map(|v| v * v).sum::<f64>() / tail as f64
        }
    })
}

/// Rescales every column linearly onto `[-1, 1]`; constant columns map to 0.
pub fn scale_features(x: &Matrix) -> Matrix {
    let bounds: Vec<(f64, f64)> = (0..x.cols())
        .map(|j| {
            x.col(j)
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
        })
        .collect();
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        let (lo, hi) = bounds[j];
        if hi > lo { 2.0 * (x[(i, j)] - lo) / (hi - lo) - 1.0 } else { 0.0 }
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn sse(x: &Matrix, centers: &Matrix, assignments: &[usize]) -> f64 {
    assignments.iter().enumerate().map(|(i, &c)| sq_dist(x.row(i), centers.row(c))).sum()
}

/// k-means++ seeding.
pub fn kmeans_pp(x: &Matrix, k: usize, seed: u64) -> Matrix {
    let mut r = SeededRng::new(seed, StreamId::new(Purpose::Seeding));
    let n = x.rows();
    let mut chosen = vec![r.index(n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = r.uniform(0.0, total);
            d2.iter()
                .position(|&d| {
                    target -= d;
                    target < 0.0
                })
                .unwrap_or(n - 1)
        } else {
            r.index(n)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    Matrix::from_fn(k, x.cols(), |c, j| x[(chosen[c], j)])
}

/// New centre positions; an empty cluster takes the point farthest from its own centre.
fn update_centers(x: &Matrix, centers: &Matrix, assignments: &[usize], only: Option<usize>) -> Matrix {
    let (k, d) = centers.shape();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &c) in assignments.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in sums.row_mut(c).iter_mut().zip(x.row(i)) {
            *s += v;
        }
    }
    let mut out = centers.clone();
    for c in 0..k {
        if only.is_some_and(|o| o != c) {
            continue;
        }
        if counts[c] > 0 {
            for j in 0..d {
                out[(c, j)] = sums[(c, j)] / counts[c] as f64;
            }
        } else {
            let far = (0..x.rows())
                .max_by(|&a, &b| {
                    sq_dist(x.row(a), centers.row(assignments[a])).total_cmp(&sq_dist(x.row(b), centers.row(assignments[b])))
                })
                .unwrap_or(0);
            out.row_mut(c).copy_from_slice(x.row(far));
        }
    }
    out
}

fn argmax_rows(scores: &Matrix) -> Vec<usize> {
    (0..scores.rows())
        .map(|i| {
            let row = scores.row(i);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect()
}

fn check_inputs(x: &Matrix, p: &KMeansParams) -> Result<()> {
    if p.k == 0 || p.k > x.rows() {
        return Err(Error::param("k", format!("must lie in 1..={}", x.rows())));
    }
    if p.tail == 0 {
        return Err(Error::param("tail", "must be >= 1"));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite { context: "k-means points" });
    }
    Ok(())
}

fn lloyd(x: &Matrix, p: &KMeansParams, mut assign: impl FnMut(&Matrix, usize) -> Result<Vec<usize>>) -> Result<KMeansState> {
    check_inputs(x, p)?;
    let mut centers = kmeans_pp(x, p.k, p.seed);
    let mut assignments = assign(&centers, 0)?;
    let mut sse_history = Vec::new();
    let mut stable = 0;
    let patience = match p.update {
        CenterUpdate::All => 1,
        CenterUpdate::Single => p.k,
    };
    let mut iterations = 0;
    let mut converged = false;
    while iterations < p.max_iter {
        let only = match p.update {
            CenterUpdate::All => None,
            CenterUpdate::Single => Some(iterations % p.k),
        };
        centers = update_centers(x, &centers, &assignments, only);
        iterations += 1;
        let next = assign(&centers, iterations)?;
        sse_history.push(sse(x, &centers, &next));
        stable = if next == assignments { stable + 1 } else { 0 };
        assignments = next;
        if stable >= patience {
            converged = true;
            break;
        }
    }
    Ok(KMeansState {
        centers,
        assignments,
        iterations,
        tail: p.tail,
        converged,
        sse_history,
    })
}

/// Full-precision Lloyd iterations with the same seeding as [`kmeans_hw`].
pub fn kmeans_exact(x: &Matrix, p: &KMeansParams) -> Result<KMeansState> {
    lloyd(x, p, |c, _| {
        Ok((0..x.rows())
            .map(|i| {
                (0..c.rows()).fold(0, |best, j| {
                    if sq_dist(x.row(i), c.row(j)) < sq_dist(x.row(i), c.row(best)) { j } else { best }
                })
            })
            .collect())
    })
}

/// k-means whose point-to-centre scores `x·y − ‖y‖²/2` come from one crossbar
/// product of the augmented matrices per iteration; the centre matrix is
/// re-programmed every iteration.
pub fn kmeans_hw(x: &Matrix, engine: &EngineConfig, p: &KMeansParams) -> Result<KMeansState> {
    if x.max_abs() > 1.0 {
        return Err(Error::OutOfRange {
            what: "k-means feature",
            value: x.max_abs(),
            min: -1.0,
            max: 1.0,
        });
    }
    let xa = augment_points(x, p.tail);
    lloyd(x, p, |c, cycle| {
        let ya = augment_centers(c, p.tail).transpose();
        Ok(argmax_rows(&dpe_matmul(&xa, &ya, engine, cycle as u64)?.result))
    })
}

/// Fraction of points with matching labels under the best relabelling of `b`.
pub fn assignment_agreement(a: &[usize], b: &[usize], k: usize) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let score = |perm: &[usize]| a.iter().zip(b).filter(|&(&x, &y)| perm.get(y) == Some(&x)).count();
    let mut best = score(&perm);
    if k <= 8 {
        // Heap's algorithm over all relabellings.
        let mut c = vec![0usize; k];
        let mut i = 0;
        while i < k {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                best = best.max(score(&perm));
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
    }
    best as f64 / a.len() as f64
}

/// Three Gaussian clusters in 4-D standing in for IRIS, 50 points each.
pub fn synthetic_iris(seed: u64) -> (Matrix, Vec<usize>) {
    let means = [[5.0, 3.4, 1.5, 0.25], [5.9, 2.8, 4.3, 1.3], [6.6, 3.0, 5.6, 2.0]];
    let mut r = SeededRng::new(seed, StreamId::new(Purpose::Data).block(2, 0));
    let mut rows = Vec::with_capacity(150);
    let mut labels = Vec::with_capacity(150);
    for (c, m) in means.iter().enumerate() {
        for _ in 0..50 {
            rows.push(m.iter().map(|&v| v + r.normal(0.0, 0.3)).collect::<Vec<f64>>());
            labels.push(c);
        }
    }
    (Matrix::from_rows(&rows).expect("rows agree"), labels)
}

/// Numeric feature columns of a CSV; a trailing non-numeric column is read as class labels.
pub fn load_feature_csv(path: &Path) -> Result<(Matrix, Option<Vec<usize>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse(e.to_string()))?;
    let mut rows = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let mut values = Vec::new();
        let mut label = None;
        for (j, f) in rec.iter().enumerate() {
            match f.parse::<f64>() {
                Ok(v) if label.is_none() => values.push(v),
                _ if j + 1 == rec.len() && label.is_none() => label = Some(f.to_string()),
                _ => return Err(Error::Parse(format!("line {}: bad value `{f}`", line + 1))),
            }
        }
        if let Some(l) = label {
            let id = names.iter().position(|n| *n == l).unwrap_or_else(|| {
                names.push(l);
                names.len() - 1
            });
            labels.push(id);
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::Parse("no rows".into()));
    }
    let x = Matrix::from_rows(&rows)?;
    let labels = (labels.len() == rows.len()).then_some(labels);
    Ok((x, labels))
}

/// IRIS from `path` when it exists, otherwise the synthetic stand-in.
pub fn load_iris_or_synthetic(path: Option<&Path>, seed: u64) -> Result<(Matrix, Option<Vec<usize>>, bool)> {
    match path {
        Some(p) if p.exists() => {
            let (x, l) = load_feature_csv(p)?;
            Ok((x, l, false))
        }
        _ => {
            let (x, l) = synthetic_iris(seed);
            Ok((x, Some(l), true))
        }
    }
}
