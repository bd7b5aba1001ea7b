//! Dense row-major `f64` tensors.
//!
//! Shapes never broadcast: every binary operation requires identical shapes
//! and reports both sides on mismatch.

use crate::error::{dim_err, Error, Result};
use crate::par;

/// Dense n-dimensional array stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(dim_err("new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    /// 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(dim_err("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Size of the leading (batch) dimension.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of elements per leading index.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let len = self.row_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.row_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Copies rows `indices` into a new tensor with the same trailing shape.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let len = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self { shape, data }
    }

    fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        self.check_same(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| alpha * v)
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &Tensor, alpha: f64) -> Result<()> {
        self.check_same(other, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn relu(&self) -> Self {
        self.map(|v| v.max(0.0))
    }

    /// Elementwise exponential; arguments are clamped so the result stays finite.
    pub fn exp(&self) -> Self {
        const MAX_ARG: f64 = 709.0;
        self.map(|v| v.min(MAX_ARG).exp())
    }

    pub fn log(&self) -> Result<Self> {
        if let Some(v) = self.data.iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                reason: format!("non-positive entry {v}"),
            });
        }
        Ok(self.map(f64::ln))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    /// Dot product over the flattened data.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same(other, "dot")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.as_matrix("transpose")?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data,
        })
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(dim_err(op, &self.shape, &[])),
        }
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (n, d1) = self.as_matrix("matmul")?;
        let (k, d2) = other.as_matrix("matmul")?;
        if d1 != k {
            return Err(dim_err("matmul", &self.shape, &other.shape));
        }
        let mut data = vec![0.0; n * d2];
        par::for_each_chunk_mut(&mut data, d2, |i, out| {
            matvec_row(&self.data[i * d1..(i + 1) * d1], &other.data, d2, out);
        });
        Ok(Self {
            shape: vec![n, d2],
            data,
        })
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Self> {
        let (n, d1) = self.as_matrix("t_matmul")?;
        let (m, d2) = other.as_matrix("t_matmul")?;
        if n != m {
            return Err(dim_err("t_matmul", &self.shape, &other.shape));
        }
        let mut data = vec![0.0; d1 * d2];
        par::for_each_chunk_mut(&mut data, d2, |a, out| {
            for i in 0..n {
                let xa = self.data[i * d1 + a];
                if xa != 0.0 {
                    axpy(xa, &other.data[i * d2..(i + 1) * d2], out);
                }
            }
        });
        Ok(Self {
            shape: vec![d1, d2],
            data,
        })
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Self> {
        let (n, d2) = self.as_matrix("matmul_t")?;
        let (d1, k) = other.as_matrix("matmul_t")?;
        if d2 != k {
            return Err(dim_err("matmul_t", &self.shape, &other.shape));
        }
        let mut data = vec![0.0; n * d1];
        par::for_each_chunk_mut(&mut data, d1, |i, out| {
            let row = &self.data[i * d2..(i + 1) * d2];
            for (a, o) in out.iter_mut().enumerate() {
                *o = dot(row, &other.data[a * d2..(a + 1) * d2]);
            }
        });
        Ok(Self {
            shape: vec![n, d1],
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Plain dot product of two equal-length slices.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = row · mat` for a row-major `mat` with `cols` columns.
#[inline]
pub(crate) fn matvec_row(row: &[f64], mat: &[f64], cols: usize, out: &mut [f64]) {
    out.fill(0.0);
    for (a, &xa) in row.iter().enumerate() {
        if xa != 0.0 {
            axpy(xa, &mat[a * cols..(a + 1) * cols], out);
        }
    }
}

/// Single-channel zero-padded stride-1 convolution (cross-correlation form).
///
/// `out[i1, i2] = Σ_{j1, j2} k[j1, j2] · x[i1 + j1 - c1/2, i2 + j2 - c2/2]`,
/// with out-of-bounds reads of `x` yielding zero.
pub fn conv2d(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (h, w) = match x.shape[..] {
        [h, w] => (h, w),
        _ => return Err(dim_err("conv2d", &x.shape, &k.shape)),
    };
    let (c1, c2) = match k.shape[..] {
        [c1, c2] => (c1, c2),
        _ => return Err(dim_err("conv2d", &x.shape, &k.shape)),
    };
    check_odd_kernel(c1, c2)?;
    let mut out = vec![0.0; h * w];
    conv2d_acc(&x.data, h, w, &k.data, c1, c2, &mut out);
    Tensor::new(vec![h, w], out)
}

pub(crate) fn check_odd_kernel(c1: usize, c2: usize) -> Result<()> {
    if c1.is_multiple_of(2) || c2.is_multiple_of(2) {
        return Err(Error::UnsupportedKernel(vec![c1, c2]));
    }
    Ok(())
}

/// Accumulates the convolution of `x` (h×w) with `k` (c1×c2) into `out`.
pub(crate) fn conv2d_acc(
    x: &[f64],
    h: usize,
    w: usize,
    k: &[f64],
    c1: usize,
    c2: usize,
    out: &mut [f64],
) {
    let (p1, p2) = ((c1 / 2) as isize, (c2 / 2) as isize);
    for j1 in 0..c1 {
        let d1 = j1 as isize - p1;
        // rows i1 with 0 <= i1 + d1 < h
        let i1_lo = (-d1).max(0) as usize;
        let i1_hi = (h as isize - d1).min(h as isize).max(0) as usize;
        for j2 in 0..c2 {
            let kv = k[j1 * c2 + j2];
            if kv == 0.0 {
                continue;
            }
            let d2 = j2 as isize - p2;
            let i2_lo = (-d2).max(0) as usize;
            let i2_hi = (w as isize - d2).min(w as isize).max(0) as usize;
            if i2_lo >= i2_hi {
                continue;
            }
            for i1 in i1_lo..i1_hi {
                let src_row = (i1 as isize + d1) as usize * w;
                let src = &x[(src_row as isize + i2_lo as isize + d2) as usize
                    ..(src_row as isize + i2_hi as isize + d2) as usize];
                let dst = &mut out[i1 * w + i2_lo..i1 * w + i2_hi];
                axpy(kv, src, dst);
            }
        }
    }
}

/// Accumulates the kernel gradient `dk[j1, j2] += Σ_p dout[p] · x[p + j - c/2]`.
pub(crate) fn conv2d_kernel_grad_acc(
    x: &[f64],
    dout: &[f64],
    h: usize,
    w: usize,
    c1: usize,
    c2: usize,
    dk: &mut [f64],
) {
    let (p1, p2) = ((c1 / 2) as isize, (c2 / 2) as isize);
    for j1 in 0..c1 {
        let d1 = j1 as isize - p1;
        let i1_lo = (-d1).max(0) as usize;
        let i1_hi = (h as isize - d1).min(h as isize).max(0) as usize;
        for j2 in 0..c2 {
            let d2 = j2 as isize - p2;
            let i2_lo = (-d2).max(0) as usize;
            let i2_hi = (w as isize - d2).min(w as isize).max(0) as usize;
            if i2_lo >= i2_hi {
                continue;
            }
            let mut acc = 0.0;
            for i1 in i1_lo..i1_hi {
                let src_row = (i1 as isize + d1) as usize * w;
                let lo = (src_row as isize + i2_lo as isize + d2) as usize;
                let hi = (src_row as isize + i2_hi as isize + d2) as usize;
                acc += dot(&dout[i1 * w + i2_lo..i1 * w + i2_hi], &x[lo..hi]);
            }
            dk[j1 * c2 + j2] += acc;
        }
    }
}

/// Kernel rotated by 180 degrees; convolving with it is the adjoint of
/// convolving with `k`.
pub(crate) fn flip_kernel(k: &[f64], c1: usize, c2: usize) -> Vec<f64> {
    let mut out = vec![0.0; c1 * c2];
    for j1 in 0..c1 {
        for j2 in 0..c2 {
            out[(c1 - 1 - j1) * c2 + (c2 - 1 - j2)] = k[j1 * c2 + j2];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| rng.normal()).collect()).unwrap()
    }

    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (n, d1, d2) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; n * d2];
        for i in 0..n {
            for j in 0..d2 {
                for k in 0..d1 {
                    out[i * d2 + j] += a.data()[i * d1 + k] * b.data()[k * d2 + j];
                }
            }
        }
        out
    }

    fn conv_oracle(x: &Tensor, k: &Tensor) -> Vec<f64> {
        let (h, w) = (x.shape()[0] as isize, x.shape()[1] as isize);
        let (c1, c2) = (k.shape()[0] as isize, k.shape()[1] as isize);
        let mut out = vec![0.0; (h * w) as usize];
        for i1 in 0..h {
            for i2 in 0..w {
                let mut acc = 0.0;
                for j1 in 0..c1 {
                    for j2 in 0..c2 {
                        let (s1, s2) = (i1 + j1 - c1 / 2, i2 + j2 - c2 / 2);
                        if (0..h).contains(&s1) && (0..w).contains(&s2) {
                            acc += k.data()[(j1 * c2 + j2) as usize]
                                * x.data()[(s1 * w + s2) as usize];
                        }
                    }
                }
                out[(i1 * w + i2) as usize] = acc;
            }
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], rel: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= rel * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let m = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(eye.matmul(&m).unwrap(), m);
        let a = Tensor::from_rows(&[&[1.0, 2.0]]);
        let b = Tensor::from_rows(&[&[3.0], &[4.0]]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(3);
        let a = random(&[4, 3], &mut rng);
        let b = random(&[3, 2], &mut rng);
        assert_close(a.matmul(&b).unwrap().data(), &matmul_oracle(&a, &b), 1e-12);
        // transpose variants agree with the explicit transpose
        let c = random(&[4, 2], &mut rng);
        assert_close(
            a.t_matmul(&c).unwrap().data(),
            a.transpose().unwrap().matmul(&c).unwrap().data(),
            1e-12,
        );
        assert_close(
            c.matmul_t(&b).unwrap().data(),
            c.matmul(&b.transpose().unwrap()).unwrap().data(),
            1e-12,
        );
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        match a.matmul(&b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut rng = Rng::new(5);
        let x = random(&[4, 6], &mut rng);
        let k = Tensor::new([1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &k).unwrap(), x);
    }

    #[test]
    fn conv2d_ones_counts_in_bounds_neighbours() {
        let x = Tensor::full([2, 2], 1.0);
        let k = Tensor::full([3, 3], 1.0);
        assert_eq!(conv2d(&x, &k).unwrap().data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn conv2d_matches_double_sum() {
        let mut rng = Rng::new(7);
        let x = random(&[5, 5], &mut rng);
        let k = random(&[3, 3], &mut rng);
        assert_close(conv2d(&x, &k).unwrap().data(), &conv_oracle(&x, &k), 1e-12);
        // non-square image and kernel
        let x = random(&[4, 7], &mut rng);
        let k = random(&[5, 3], &mut rng);
        assert_close(conv2d(&x, &k).unwrap().data(), &conv_oracle(&x, &k), 1e-12);
    }

    #[test]
    fn conv2d_rejects_even_kernel() {
        let x = Tensor::zeros([3, 3]);
        let k = Tensor::zeros([2, 3]);
        assert!(matches!(conv2d(&x, &k), Err(Error::UnsupportedKernel(_))));
    }

    #[test]
    fn conv2d_is_linear_in_kernel() {
        let mut rng = Rng::new(11);
        let x = random(&[6, 6], &mut rng);
        let k1 = random(&[3, 3], &mut rng);
        let k2 = random(&[3, 3], &mut rng);
        let (alpha, beta) = (0.7, -1.3);
        let mix = k1.scale(alpha).add(&k2.scale(beta)).unwrap();
        let lhs = conv2d(&x, &mix).unwrap();
        let rhs = conv2d(&x, &k1)
            .unwrap()
            .scale(alpha)
            .add(&conv2d(&x, &k2).unwrap().scale(beta))
            .unwrap();
        assert_close(lhs.data(), rhs.data(), 1e-12);
    }

    #[test]
    fn kernel_grad_and_adjoint_are_consistent() {
        // <conv(x, k), d> == <k, kernel_grad(x, d)> == <x, conv(d, flip(k))>
        let mut rng = Rng::new(13);
        let x = random(&[5, 6], &mut rng);
        let k = random(&[3, 5], &mut rng);
        let d = random(&[5, 6], &mut rng);
        let lhs = conv2d(&x, &k).unwrap().dot(&d).unwrap();
        let mut dk = vec![0.0; 15];
        conv2d_kernel_grad_acc(x.data(), d.data(), 5, 6, 3, 5, &mut dk);
        let mid = dot(&dk, k.data());
        let flipped = Tensor::new([3, 5], flip_kernel(k.data(), 3, 5)).unwrap();
        let rhs = conv2d(&d, &flipped).unwrap().dot(&x).unwrap();
        assert!((lhs - mid).abs() < 1e-10);
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn elementwise_suite() {
        let v = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(v.dot(&v).unwrap(), 25.0);
        assert_eq!(
            Tensor::vector(vec![-1.0, 0.0, 2.0]).relu().data(),
            &[0.0, 0.0, 2.0]
        );
        let mut rng = Rng::new(17);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[3, 4], &mut rng);
        let h = a.hadamard(&b).unwrap();
        for i in 0..12 {
            assert_eq!(h.data()[i], a.data()[i] * b.data()[i]);
        }
        assert!(a.add(&Tensor::zeros([4, 3])).is_err());
        assert!((a.add(&b).unwrap().sub(&b).unwrap().sub(&a).unwrap().sum()).abs() < 1e-12);
        assert!((Tensor::vector(vec![1.0, 2.0, 3.0]).mean() - 2.0).abs() < 1e-15);
        let e = Tensor::vector(vec![0.0, 1.0]).exp();
        assert!((e.log().unwrap().data()[1] - 1.0).abs() < 1e-15);
        assert!(Tensor::vector(vec![0.0]).log().is_err());
        assert!(Tensor::vector(vec![1e6]).exp().all_finite());
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new([2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::zeros([2, 3]).reshape([3, 3]).is_err());
    }
}
