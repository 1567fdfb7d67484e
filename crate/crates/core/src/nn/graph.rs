//! Reverse-mode autodiff on a flat tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order. Every op saves the full-precision operands it
//! needs; an op whose forward value came from simulated hardware still
//! differentiates through those saved operands (straight-through).

use super::tensor::{col2im, img2col, kernel_matrix, nchw_to_rows, rows_to_nchw, ConvGeometry, Tensor};
use crate::error::{Error, Result};
use crate::numerics::{matmul_exact, Matrix};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Relu { x: Var },
    Conv2d { x: Var, w: Var, geo: ConvGeometry, cols: Matrix },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Flatten { x: Var },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    WeightedSum { x: Var, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Straight-through gradients of `out = x · w + b`.
///
/// Returns `(grad_x, grad_w, grad_b)`; `x` is the saved full-precision input.
pub fn backward_linear(grad_out: &Matrix, x: Option<&Matrix>, w: &Matrix) -> Result<(Matrix, Matrix, Vec<f64>)> {
    let x = x.ok_or_else(|| Error::MissingActivations("linear layer input was not saved".into()))?;
    let grad_x = matmul_exact(grad_out, &w.transpose())?;
    let grad_w = matmul_exact(&x.transpose(), grad_out)?;
    let grad_b = (0..grad_out.cols())
        .map(|j| (0..grad_out.rows()).map(|i| grad_out[(i, j)]).sum())
        .collect();
    Ok((grad_x, grad_w, grad_b))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// `a · b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_exact(&self.value(a).to_matrix()?, &self.value(b).to_matrix()?)?;
        Ok(self.push(Tensor::from_matrix(&value), Op::MatMul { a, b }))
    }

    /// Records `a · b` with an externally computed forward value.
    pub fn matmul_with_value(&mut self, a: Var, b: Var, value: Matrix) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] || value.shape() != (sa[0], sb[1]) {
            return Err(Error::dims("Graph::matmul_with_value", format!("{sa:?} x {sb:?} -> {:?}", value.shape())));
        }
        Ok(self.push(Tensor::from_matrix(&value), Op::MatMul { a, b }))
    }

    /// Adds `b` along the last axis of a 2-D input or the channel axis of NCHW.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        let shape = xv.shape().to_vec();
        let (channels, inner) = match shape.as_slice() {
            [_, n] => (*n, 1),
            [_, c, h, w] => (*c, h * w),
            other => return Err(Error::dims("Graph::add_bias", format!("unsupported shape {other:?}"))),
        };
        if bv.numel() != channels {
            return Err(Error::dims("Graph::add_bias", format!("{} biases for {channels} channels", bv.numel())));
        }
        let mut out = xv.clone();
        for (idx, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[(idx / inner) % channels];
        }
        Ok(self.push(out, Op::AddBias { x, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    /// Convolution of NCHW `x` with `(O, C, kh, kw)` kernels `w`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (geo, cols) = self.conv_prepare(x, w, stride, padding)?;
        let prod = matmul_exact(&cols, &kernel_matrix(self.value(w))?)?;
        self.conv_finish(x, w, geo, cols, prod)
    }

    /// Convolution whose `(N*OH*OW) x O` product was computed externally
    /// from `conv_columns(x)`.
    pub fn conv2d_with_value(&mut self, x: Var, w: Var, stride: usize, padding: usize, product: Matrix) -> Result<Var> {
        let (geo, cols) = self.conv_prepare(x, w, stride, padding)?;
        let o = self.value(w).shape()[0];
        if product.shape() != (cols.rows(), o) {
            return Err(Error::dims("Graph::conv2d_with_value", format!("product {:?}", product.shape())));
        }
        self.conv_finish(x, w, geo, cols, product)
    }

    fn conv_prepare(&self, x: Var, w: Var, stride: usize, padding: usize) -> Result<(ConvGeometry, Matrix)> {
        let (_, c, _, _) = self.value(x).dims4()?;
        let (_, wc, kh, kw) = self.value(w).dims4()?;
        if wc != c {
            return Err(Error::dims("Graph::conv2d", format!("kernel has {wc} channels, input {c}")));
        }
        let geo = ConvGeometry {
            kh,
            kw,
            stride,
            padding,
        };
        Ok((geo, img2col(self.value(x), geo)?))
    }

    fn conv_finish(&mut self, x: Var, w: Var, geo: ConvGeometry, cols: Matrix, prod: Matrix) -> Result<Var> {
        let (n, _, h, wd) = self.value(x).dims4()?;
        let (oh, ow) = geo.output_size(h, wd)?;
        let value = rows_to_nchw(&prod, n, oh, ow);
        Ok(self.push(value, Op::Conv2d { x, w, geo, cols }))
    }

    /// Non-overlapping 2x2 max pooling (odd trailing rows/cols dropped).
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::dims("Graph::maxpool2", format!("{h}x{w} input")));
        }
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0; n * c * oh * ow];
        let data = xv.data();
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = usize::MAX;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = plane * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if best == usize::MAX || data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out.data_mut()[o] = data[best];
                    argmax[o] = best;
                }
            }
        }
        Ok(self.push(out, Op::MaxPool2 { x, argmax }))
    }

    /// Collapses all axes after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).as_2d()?;
        Ok(self.push(Tensor::from_matrix(&out), Op::Flatten { x }))
    }

    /// Mean softmax cross-entropy of `(batch, classes)` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let m = self.value(logits).to_matrix()?;
        if labels.len() != m.rows() {
            return Err(Error::dims("softmax_cross_entropy", format!("{} labels for {} rows", labels.len(), m.rows())));
        }
        let mut probs = vec![0.0; m.rows() * m.cols()];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            if label >= m.cols() {
                return Err(Error::OutOfRange {
                    what: "class label",
                    value: label as f64,
                    min: 0.0,
                    max: (m.cols() - 1) as f64,
                });
            }
            let row = m.row(i);
            let peak = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - peak).exp()).sum();
            for (j, v) in row.iter().enumerate() {
                probs[i * m.cols() + j] = (v - peak).exp() / z;
            }
            loss -= row[label] - peak - z.ln();
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `sum_i x_i * weights_i`; a fixed linear read-out.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() != weights.len() {
            return Err(Error::dims("weighted_sum", format!("{} weights for {} values", weights.len(), xv.numel())));
        }
        let s = xv.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        match &mut self.nodes[v.0].grad {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dims("Graph::backward", "loss must be a scalar"));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(gout) = self.nodes[idx].grad.clone() else {
                continue;
            };
            let contributions: Vec<(Var, Tensor)> = match &self.nodes[idx].op {
                Op::Leaf => Vec::new(),
                Op::MatMul { a, b } => {
                    let am = self.value(*a).to_matrix()?;
                    let bm = self.value(*b).to_matrix()?;
                    let g = gout.to_matrix()?;
                    vec![
                        (*a, Tensor::from_matrix(&matmul_exact(&g, &bm.transpose())?)),
                        (*b, Tensor::from_matrix(&matmul_exact(&am.transpose(), &g)?)),
                    ]
                }
                Op::AddBias { x, b } => {
                    let c = self.value(*b).numel();
                    let shape = gout.shape();
                    let inner = if shape.len() == 4 { shape[2] * shape[3] } else { 1 };
                    let mut gb = vec![0.0; c];
                    for (i, v) in gout.data().iter().enumerate() {
                        gb[(i / inner) % c] += v;
                    }
                    let bshape = self.value(*b).shape().to_vec();
                    vec![(*x, gout.clone()), (*b, Tensor::new(bshape, gb)?)]
                }
                Op::Relu { x } => {
                    let mut g = gout.clone();
                    for (gv, xv) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if *xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    vec![(*x, g)]
                }
                Op::Conv2d { x, w, geo, cols } => {
                    let g = nchw_to_rows(&gout)?;
                    let wt = self.value(*w);
                    let wshape = wt.shape().to_vec();
                    let kmat = kernel_matrix(wt)?;
                    let gk = matmul_exact(&cols.transpose(), &g)?;
                    let gw = Tensor::new(wshape, gk.transpose().into_vec())?;
                    let gcols = matmul_exact(&g, &kmat.transpose())?;
                    let gx = col2im(&gcols, self.value(*x).dims4()?, *geo)?;
                    vec![(*x, gx), (*w, gw)]
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut g = Tensor::zeros(self.value(*x).shape());
                    for (o, &src) in argmax.iter().enumerate() {
                        g.data_mut()[src] += gout.data()[o];
                    }
                    vec![(*x, g)]
                }
                Op::Flatten { x } => vec![(*x, gout.reshape(self.value(*x).shape())?)],
                Op::SoftmaxCe { logits, labels, probs } => {
                    let shape = self.value(*logits).shape().to_vec();
                    let classes = shape[1];
                    let scale = gout.data()[0] / labels.len() as f64;
                    let mut g = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        g[i * classes + l] -= 1.0;
                    }
                    g.iter_mut().for_each(|v| *v *= scale);
                    vec![(*logits, Tensor::new(shape, g)?)]
                }
                Op::WeightedSum { x, weights } => {
                    let s = gout.data()[0];
                    let shape = self.value(*x).shape().to_vec();
                    vec![(*x, Tensor::new(shape, weights.iter().map(|w| w * s).collect())?)]
                }
            };
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Purpose, SeededRng, StreamId};

    fn random(shape: &[usize], r: &mut SeededRng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(loss)/d(inputs[k]) for every input.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let h = 1e-5;
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.backward(loss).unwrap();
        let analytic: Vec<Tensor> = vars
            .iter()
            .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
            .collect();
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
            let l = build(&mut g, &vars);
            g.value(l).data()[0]
        };
        for (k, t) in inputs.iter().enumerate() {
            for i in 0..t.numel() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[k].data()[i];
                let denom = a.abs().max(numeric.abs()).max(1e-2);
                assert!((a - numeric).abs() / denom <= 1e-4, "input {k}[{i}]: analytic {a}, numeric {numeric}");
            }
        }
    }

    fn readout(n: usize, seed: u64) -> Vec<f64> {
        let mut r = SeededRng::new(seed, StreamId::new(Purpose::Test));
        (0..n).map(|_| r.uniform(-1.0, 1.0)).collect()
    }

    #[test]
    fn matmul_gradients() {
        let mut r = SeededRng::new(1, StreamId::new(Purpose::Test));
        let w = readout(15, 2);
        check(vec![random(&[3, 4], &mut r), random(&[4, 5], &mut r)], |g, v| {
            let m = g.matmul(v[0], v[1]).unwrap();
            g.weighted_sum(m, &w).unwrap()
        });
    }

    #[test]
    fn bias_gradients_2d_and_nchw() {
        let mut r = SeededRng::new(3, StreamId::new(Purpose::Test));
        let w = readout(12, 4);
        check(vec![random(&[3, 4], &mut r), random(&[4], &mut r)], |g, v| {
            let m = g.add_bias(v[0], v[1]).unwrap();
            g.weighted_sum(m, &w).unwrap()
        });
        let w = readout(2 * 3 * 2 * 2, 5);
        check(vec![random(&[2, 3, 2, 2], &mut r), random(&[3], &mut r)], |g, v| {
            let m = g.add_bias(v[0], v[1]).unwrap();
            g.weighted_sum(m, &w).unwrap()
        });
    }

    #[test]
    fn relu_gradients() {
        let mut r = SeededRng::new(6, StreamId::new(Purpose::Test));
        let mut x = random(&[4, 5], &mut r);
        // Keep entries away from the kink.
        x.data_mut().iter_mut().for_each(|v| {
            if v.abs() < 0.05 {
                *v += 0.1
            }
        });
        let w = readout(20, 7);
        check(vec![x], |g, v| {
            let m = g.relu(v[0]);
            g.weighted_sum(m, &w).unwrap()
        });
    }

    #[test]
    fn conv_gradients() {
        let mut r = SeededRng::new(8, StreamId::new(Purpose::Test));
        let x = random(&[2, 2, 5, 5], &mut r);
        let k = random(&[3, 2, 3, 3], &mut r);
        let w = readout(2 * 3 * 3 * 3, 9);
        check(vec![x, k], |g, v| {
            let m = g.conv2d(v[0], v[1], 2, 1).unwrap();
            g.weighted_sum(m, &w).unwrap()
        });
    }

    #[test]
    fn maxpool_gradients() {
        let mut r = SeededRng::new(10, StreamId::new(Purpose::Test));
        // Distinct, well-separated values keep the argmax stable under the probe.
        let mut vals: Vec<f64> = (0..2 * 2 * 4 * 4).map(|i| i as f64 * 0.1).collect();
        r.shuffle(&mut vals);
        let x = Tensor::new(vec![2, 2, 4, 4], vals).unwrap();
        let w = readout(2 * 2 * 2 * 2, 11);
        check(vec![x], |g, v| {
            let m = g.maxpool2(v[0]).unwrap();
            g.weighted_sum(m, &w).unwrap()
        });
    }

    #[test]
    fn flatten_and_cross_entropy_gradients() {
        let mut r = SeededRng::new(12, StreamId::new(Purpose::Test));
        check(vec![random(&[3, 2, 2, 1], &mut r)], |g, v| {
            let f = g.flatten(v[0]).unwrap();
            g.softmax_cross_entropy(f, &[0, 3, 2]).unwrap()
        });
    }

    #[test]
    fn small_cnn_end_to_end_gradients() {
        let mut r = SeededRng::new(13, StreamId::new(Purpose::Test));
        let x = random(&[2, 1, 6, 6], &mut r);
        let k = random(&[2, 1, 3, 3], &mut r);
        let kb = random(&[2], &mut r);
        let w = random(&[8, 3], &mut r);
        let b = random(&[3], &mut r);
        check(vec![x, k, kb, w, b], |g, v| {
            let c = g.conv2d(v[0], v[1], 1, 0).unwrap();
            let c = g.add_bias(c, v[2]).unwrap();
            let p = g.maxpool2(c).unwrap();
            let f = g.flatten(p).unwrap();
            let l = g.matmul(f, v[3]).unwrap();
            let l = g.add_bias(l, v[4]).unwrap();
            g.softmax_cross_entropy(l, &[1, 2]).unwrap()
        });
    }

    #[test]
    fn backward_linear_examples() {
        let mut r = SeededRng::new(14, StreamId::new(Purpose::Test));
        let x = Matrix::from_fn(5, 4, |_, _| r.uniform(-1.0, 1.0));
        let w = Matrix::from_fn(4, 3, |_, _| r.uniform(-1.0, 1.0));
        let (gx, gw, gb) = backward_linear(&Matrix::zeros(5, 3), Some(&x), &w).unwrap();
        assert!(gx.max_abs() == 0.0 && gw.max_abs() == 0.0 && gb.iter().all(|&v| v == 0.0));
        assert!(matches!(
            backward_linear(&Matrix::zeros(5, 3), None, &w),
            Err(Error::MissingActivations(_))
        ));
        // Matches the tape.
        let gout = Matrix::from_fn(5, 3, |_, _| r.uniform(-1.0, 1.0));
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::from_matrix(&x));
        let wv = g.leaf(Tensor::from_matrix(&w));
        let bv = g.leaf(Tensor::zeros(&[3]));
        let m = g.matmul(xv, wv).unwrap();
        let o = g.add_bias(m, bv).unwrap();
        let l = g.weighted_sum(o, gout.data()).unwrap();
        g.backward(l).unwrap();
        let (gx, gw, gb) = backward_linear(&gout, Some(&x), &w).unwrap();
        assert_eq!(g.grad(xv).unwrap().to_matrix().unwrap(), gx);
        assert_eq!(g.grad(wv).unwrap().to_matrix().unwrap(), gw);
        assert_eq!(g.grad(bv).unwrap().data(), gb.as_slice());
    }

    #[test]
    fn externally_valued_matmul_keeps_exact_gradients() {
        let mut r = SeededRng::new(15, StreamId::new(Purpose::Test));
        let a = Matrix::from_fn(3, 4, |_, _| r.uniform(-1.0, 1.0));
        let b = Matrix::from_fn(4, 2, |_, _| r.uniform(-1.0, 1.0));
        let ro = readout(6, 16);
        let grads = |value: Option<Matrix>| {
            let mut g = Graph::new();
            let av = g.leaf(Tensor::from_matrix(&a));
            let bv = g.leaf(Tensor::from_matrix(&b));
            let m = match value {
                Some(v) => g.matmul_with_value(av, bv, v).unwrap(),
                None => g.matmul(av, bv).unwrap(),
            };
            let l = g.weighted_sum(m, &ro).unwrap();
            g.backward(l).unwrap();
            (g.grad(av).unwrap().clone(), g.grad(bv).unwrap().clone())
        };
        assert_eq!(grads(None), grads(Some(Matrix::filled(3, 2, 42.0))));
    }
}
