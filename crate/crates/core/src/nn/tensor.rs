use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Dense n-dimensional array, row-major (last index fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dims(
                "Tensor::new",
                format!("{} values for shape {shape:?}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// Views a 2-D tensor as a matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape.as_slice() {
            [r, c] => Matrix::from_vec(*r, *c, self.data.clone()),
            other => Err(Error::dims("Tensor::to_matrix", format!("shape {other:?} is not 2-D"))),
        }
    }

    /// Leading dimension and product of the rest.
    pub fn as_2d(&self) -> Result<Matrix> {
        let n = *self.shape.first().ok_or_else(|| Error::dims("Tensor::as_2d", "empty shape"))?;
        let rest = if n == 0 { 0 } else { self.data.len() / n };
        Matrix::from_vec(n, rest, self.data.clone())
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            other => Err(Error::dims("Tensor::dims4", format!("expected NCHW, got {other:?}"))),
        }
    }
}

/// Geometry of a 2-D convolution window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::param("stride", "must be >= 1"));
        }
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if self.kh == 0 || self.kw == 0 || self.kh > ph || self.kw > pw {
            return Err(Error::dims(
                "conv",
                format!("{}x{} kernel on {ph}x{pw} padded input", self.kh, self.kw),
            ));
        }
        Ok(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }
}

/// Unrolls every receptive field of an NCHW tensor into one row.
///
/// Rows are ordered `(n, oh, ow)`; columns `(c, ki, kj)`.
pub fn img2col(x: &Tensor, geo: ConvGeometry) -> Result<Matrix> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = geo.output_size(h, w)?;
    let cols = c * geo.kh * geo.kw;
    let mut out = Matrix::zeros(n * oh * ow, cols);
    let data = x.data();
    let pad = geo.padding as isize;
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = out.row_mut((b * oh + oy) * ow + ox);
                let mut k = 0;
                for ch in 0..c {
                    let plane = &data[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for ky in 0..geo.kh {
                        let iy = (oy * geo.stride + ky) as isize - pad;
                        for kx in 0..geo.kw {
                            let ix = (ox * geo.stride + kx) as isize - pad;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                row[k] = plane[iy as usize * w + ix as usize];
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`img2col`]: scatters column gradients back onto the input.
pub fn col2im(cols: &Matrix, shape: (usize, usize, usize, usize), geo: ConvGeometry) -> Result<Tensor> {
    let (n, c, h, w) = shape;
    let (oh, ow) = geo.output_size(h, w)?;
    if cols.shape() != (n * oh * ow, c * geo.kh * geo.kw) {
        return Err(Error::dims("col2im", format!("columns {:?} for input {shape:?}", cols.shape())));
    }
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let pad = geo.padding as isize;
    let data = out.data_mut();
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = cols.row((b * oh + oy) * ow + ox);
                let mut k = 0;
                for ch in 0..c {
                    let base = (b * c + ch) * h * w;
                    for ky in 0..geo.kh {
                        let iy = (oy * geo.stride + ky) as isize - pad;
                        for kx in 0..geo.kw {
                            let ix = (ox * geo.stride + kx) as isize - pad;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                data[base + iy as usize * w + ix as usize] += row[k];
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Kernel tensor `(O, C, kh, kw)` as the `(C*kh*kw) x O` matrix used with [`img2col`].
pub fn kernel_matrix(w: &Tensor) -> Result<Matrix> {
    let (o, c, kh, kw) = w.dims4()?;
    Ok(Matrix::from_vec(o, c * kh * kw, w.data().to_vec())?.transpose())
}

/// Reorders a `(N*OH*OW) x O` product into an `(N, O, OH, OW)` tensor.
pub fn rows_to_nchw(m: &Matrix, n: usize, oh: usize, ow: usize) -> Tensor {
    let o = m.cols();
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for p in 0..oh * ow {
            let row = m.row(b * oh * ow + p);
            for (ch, &v) in row.iter().enumerate() {
                out[(b * o + ch) * oh * ow + p] = v;
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).expect("sizes agree")
}

/// Inverse of [`rows_to_nchw`].
pub fn nchw_to_rows(t: &Tensor) -> Result<Matrix> {
    let (n, o, oh, ow) = t.dims4()?;
    let mut m = Matrix::zeros(n * oh * ow, o);
    let data = t.data();
    for b in 0..n {
        for ch in 0..o {
            for p in 0..oh * ow {
                m[(b * oh * ow + p, ch)] = data[(b * o + ch) * oh * ow + p];
            }
        }
    }
    Ok(m)
}

/// Direct nested-loop convolution, used as a reference.
pub fn conv2d_direct(x: &Tensor, w: &Tensor, geo: ConvGeometry) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, wc, kh, kw) = w.dims4()?;
    if wc != c || kh != geo.kh || kw != geo.kw {
        return Err(Error::dims("conv2d_direct", "kernel does not match input"));
    }
    let (oh, ow) = geo.output_size(h, wd)?;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let pad = geo.padding as isize;
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * geo.stride + ky) as isize - pad;
                                let ix = (ox * geo.stride + kx) as isize - pad;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data()[((b * c + ch) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oc * c + ch) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out.data_mut()[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{matmul_exact, Purpose, SeededRng, StreamId};

    fn random(shape: &[usize], r: &mut SeededRng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn geo(k: usize, stride: usize, padding: usize) -> ConvGeometry {
        ConvGeometry {
            kh: k,
            kw: k,
            stride,
            padding,
        }
    }

    #[test]
    fn one_by_one_kernel_is_reshape() {
        let x = Tensor::new(vec![1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let cols = img2col(&x, geo(1, 1, 0)).unwrap();
        assert_eq!(cols.shape(), (4, 2));
        assert_eq!(cols.col(0), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(cols.col(1), vec![4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn hand_enumerated_three_by_three() {
        let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let cols = img2col(&x, geo(2, 1, 0)).unwrap();
        let want = Matrix::from_rows(&[
            [1.0, 2.0, 4.0, 5.0],
            [2.0, 3.0, 5.0, 6.0],
            [4.0, 5.0, 7.0, 8.0],
            [5.0, 6.0, 8.0, 9.0],
        ])
        .unwrap();
        assert_eq!(cols, want);
    }

    #[test]
    fn kernel_too_large_rejected() {
        let x = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(img2col(&x, geo(4, 1, 0)).is_err());
        assert!(img2col(&x, geo(4, 1, 1)).is_ok());
    }

    #[test]
    fn img2col_conv_matches_loop_oracle() {
        let mut r = SeededRng::new(1, StreamId::new(Purpose::Test));
        for _ in 0..50 {
            let (n, c, o) = (1 + r.index(2), 1 + r.index(3), 1 + r.index(3));
            let k = 1 + r.index(3);
            let (h, w) = (k + r.index(4), k + r.index(4));
            let g = geo(k, 1 + r.index(2), r.index(2));
            let x = random(&[n, c, h, w], &mut r);
            let wt = random(&[o, c, k, k], &mut r);
            let (oh, ow) = g.output_size(h, w).unwrap();
            let prod = matmul_exact(&img2col(&x, g).unwrap(), &kernel_matrix(&wt).unwrap()).unwrap();
            let got = rows_to_nchw(&prod, n, oh, ow);
            let want = conv2d_direct(&x, &wt, g).unwrap();
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(nchw_to_rows(&got).unwrap(), prod);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_img2col() {
        // <img2col(x), y> == <x, col2im(y)> for random x, y.
        let mut r = SeededRng::new(2, StreamId::new(Purpose::Test));
        let g = geo(3, 2, 1);
        let x = random(&[2, 2, 5, 6], &mut r);
        let cols = img2col(&x, g).unwrap();
        let y = Matrix::from_fn(cols.rows(), cols.cols(), |_, _| r.uniform(-1.0, 1.0));
        let lhs: f64 = cols.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let back = col2im(&y, (2, 2, 5, 6), g).unwrap();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
