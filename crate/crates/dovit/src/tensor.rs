//! Minimal dense numeric kernels: matrix multiply, softmax, layer norm,
//! GELU and bilinear upsampling.
//!
//! All arithmetic is 64-bit. Every public operation returns finite values
//! for finite inputs; constructors reject non-finite data up front.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a row-major buffer. Rejects length mismatches and
    /// non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "matrix contains non-finite value {bad}"
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from explicit rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows".to_string()));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    /// Fill elementwise from a function of (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Borrow one row as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Full row-major buffer.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Matrix product `self * other`.
    ///
    /// Backed by a blocked GEMM; the accumulation order is fixed by the
    /// operand shapes, so repeated calls on identical inputs are bitwise
    /// identical.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "matmul {}x{} by {}x{}: inner dimensions differ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let out = self.view().dot(&other.view());
        Ok(Matrix::from_array(out))
    }

    pub(crate) fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &self.data)
            .expect("matrix buffer matches its declared shape")
    }

    pub(crate) fn view_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut self.data)
            .expect("matrix buffer matches its declared shape")
    }

    pub(crate) fn from_array(a: Array2<f64>) -> Matrix {
        let (rows, cols) = a.dim();
        let data = match a.into_raw_vec_and_offset() {
            (v, Some(0)) | (v, None) => v,
            (v, Some(off)) => v[off..off + rows * cols].to_vec(),
        };
        Matrix { rows, cols, data }
    }

    /// Add a bias vector to every row in place.
    pub fn add_row_bias(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.cols, "bias length must match columns");
        for r in 0..self.rows {
            for (v, b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += *b;
            }
        }
    }

    /// Elementwise addition in place. Shapes must match.
    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.rows, other.rows, "row count mismatch in add");
        assert_eq!(self.cols, other.cols, "column count mismatch in add");
        for (v, o) in self.data.iter_mut().zip(&other.data) {
            *v += *o;
        }
    }

    /// Apply a scalar function to every element in place.
    pub fn map_in_place(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// Round every element through 32-bit precision. Used by the engine's
    /// f32 mode to emulate single-precision storage while keeping f64
    /// accumulation in the kernels.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Maximum absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Numerically stable softmax: shifts by the max before exponentiating.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::shape("softmax of empty vector".to_string()));
    }
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place variant used on attention rows.
pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in x.iter_mut() {
        *v *= inv;
    }
}

/// Row-wise layer normalization with affine parameters.
///
/// Each row is shifted to mean 0 and scaled to unit variance (population
/// variance, `eps` added under the square root), then `gamma`/`beta` are
/// applied per column.
pub fn layer_norm(x: &Matrix, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Matrix> {
    if gamma.len() != x.cols() || beta.len() != x.cols() {
        return Err(Error::shape(format!(
            "layer_norm: gamma/beta length {}/{} does not match {} columns",
            gamma.len(),
            beta.len(),
            x.cols()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let n = x.cols() as f64;
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        let dst = out.row_mut(r);
        for c in 0..row.len() {
            dst[c] = (row[c] - mean) * inv_std * gamma[c] + beta[c];
        }
    }
    Ok(out)
}

/// Exact-erf GELU: `x * Phi(x)` with `Phi` the standard normal CDF.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Bilinear upsampling of a channel-major `C x h x w` volume.
///
/// Sample positions follow the align-corners-false convention: output
/// pixel `i` reads source coordinate `(i + 0.5) * in/out - 0.5`, with
/// edge clamping. Constant inputs therefore stay constant.
pub fn bilinear_upsample(
    data: &[f64],
    channels: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>> {
    if data.len() != channels * in_h * in_w {
        return Err(Error::shape(format!(
            "upsample: data length {} does not match {channels}x{in_h}x{in_w}",
            data.len()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("upsample: zero target size".to_string()));
    }
    if out_h < in_h || out_w < in_w {
        return Err(Error::shape(format!(
            "upsample: target {out_h}x{out_w} smaller than source {in_h}x{in_w}"
        )));
    }

    let sample = |size_in: usize, size_out: usize, i: usize| -> (usize, usize, f64) {
        let src = (i as f64 + 0.5) * (size_in as f64 / size_out as f64) - 0.5;
        let floor = src.floor();
        let frac = src - floor;
        let lo = floor.max(0.0) as usize;
        let hi = ((floor + 1.0).max(0.0) as usize).min(size_in - 1);
        let lo = lo.min(size_in - 1);
        (lo, hi, frac)
    };

    let mut out = vec![0.0; channels * out_h * out_w];
    for c in 0..channels {
        let src_plane = &data[c * in_h * in_w..(c + 1) * in_h * in_w];
        let dst_plane = &mut out[c * out_h * out_w..(c + 1) * out_h * out_w];
        for y in 0..out_h {
            let (y0, y1, fy) = sample(in_h, out_h, y);
            for x in 0..out_w {
                let (x0, x1, fx) = sample(in_w, out_w, x);
                let v00 = src_plane[y0 * in_w + x0];
                let v01 = src_plane[y0 * in_w + x1];
                let v10 = src_plane[y1 * in_w + x0];
                let v11 = src_plane[y1 * in_w + x1];
                let top = v00 + (v01 - v00) * fx;
                let bottom = v10 + (v11 - v10) * fx;
                dst_plane[y * out_w + x] = top + (bottom - top) * fy;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent triple-loop product used as the matmul oracle.
    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn lcg_values(n: usize, seed: &mut u64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((*seed >> 33) as f64 / (1u64 << 31) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let out = Matrix::identity(2).matmul(&a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_hand_expansion() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.rows(), 1);
        assert_eq!(out.cols(), 1);
        assert_eq!(out.get(0, 0), 11.0);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut seed = 7u64;
        let a = Matrix::from_vec(5, 7, lcg_values(35, &mut seed)).unwrap();
        let b = Matrix::from_vec(7, 3, lcg_values(21, &mut seed)).unwrap();
        let got = a.matmul(&b).unwrap();
        let want = naive_matmul(&a, &b);
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_associative_on_random_triples() {
        let mut seed = 99u64;
        for _ in 0..20 {
            let a = Matrix::from_vec(4, 5, lcg_values(20, &mut seed)).unwrap();
            let b = Matrix::from_vec(5, 3, lcg_values(15, &mut seed)).unwrap();
            let c = Matrix::from_vec(3, 6, lcg_values(18, &mut seed)).unwrap();
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left
                .as_slice()
                .iter()
                .map(|v| v.abs())
                .fold(1.0, f64::max);
            assert!(left.max_abs_diff(&right) / scale <= 1e-9);
        }
    }

    #[test]
    fn softmax_symmetry() {
        let out = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(out, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let out = softmax(&[1000.0, 1000.0]).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 0.5).abs() < 1e-12);
        assert!((out[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_closed_form() {
        // exp(0) / (exp(0) + exp(ln 3)) = 1/4
        let out = softmax(&[0.0, 3.0f64.ln()]).unwrap();
        assert!((out[0] - 0.25).abs() < 1e-12);
        assert!((out[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_empty_is_shape_error() {
        assert!(matches!(softmax(&[]), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant() {
        let mut seed = 3u64;
        for _ in 0..200 {
            let x: Vec<f64> = lcg_values(9, &mut seed).iter().map(|v| v * 50.0).collect();
            let p = softmax(&x).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let shifted: Vec<f64> = x.iter().map(|v| v + 17.25).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Matrix::from_rows(&[vec![4.0, 4.0, 4.0]]).unwrap();
        let out = layer_norm(&x, &[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0], 1e-6).unwrap();
        for v in out.as_slice() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        // mean 2, population std 1 -> normalized to [-1, 1]
        let x = Matrix::from_rows(&[vec![1.0, 3.0]]).unwrap();
        let out = layer_norm(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-15).unwrap();
        assert!((out.get(0, 0) + 1.0).abs() < 1e-7);
        assert!((out.get(0, 1) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn layer_norm_gamma_zero_yields_beta() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let out = layer_norm(&x, &[0.0, 0.0], &[7.0, -2.0], 1e-6).unwrap();
        for r in 0..2 {
            assert_eq!(out.row(r), &[7.0, -2.0]);
        }
    }

    #[test]
    fn layer_norm_length_mismatch() {
        let x = Matrix::zeros(1, 3);
        assert!(matches!(
            layer_norm(&x, &[1.0], &[0.0, 0.0, 0.0], 1e-6),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn layer_norm_row_statistics() {
        let mut seed = 5u64;
        for _ in 0..50 {
            let x = Matrix::from_vec(3, 16, lcg_values(48, &mut seed)).unwrap();
            let out = layer_norm(
                &x,
                &vec![1.0; 16],
                &vec![0.0; 16],
                1e-12,
            )
            .unwrap();
            for r in 0..3 {
                let row = out.row(r);
                let mean = row.iter().sum::<f64>() / 16.0;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
                assert!(mean.abs() <= 1e-9);
                assert!((var - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn gelu_at_zero() {
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn gelu_asymptote() {
        for x in [6.0, 8.0, 20.0] {
            assert!((gelu(x) - x).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_at_one() {
        // 1 * Phi(1), Phi(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-12);
    }

    #[test]
    fn gelu_bounded_by_identity_and_zero() {
        // min(0, x) <= gelu(x) <= max(0, x) holds everywhere because
        // gelu(x) = x * Phi(x) and Phi is in (0, 1).
        let mut x = -8.0;
        while x < 8.0 {
            let y = gelu(x);
            assert!(y >= x.min(0.0) - 1e-12, "gelu below envelope at {x}");
            assert!(y <= x.max(0.0) + 1e-12, "gelu above envelope at {x}");
            x += 0.05;
        }
    }

    #[test]
    fn gelu_monotone_for_nonnegative_inputs() {
        let mut prev = gelu(0.0);
        let mut x = 0.0;
        while x < 8.0 {
            x += 0.05;
            let y = gelu(x);
            assert!(y >= prev, "gelu not monotone at {x}");
            prev = y;
        }
    }

    #[test]
    fn upsample_constant_map_stays_constant() {
        let data = vec![5.0; 4];
        let out = bilinear_upsample(&data, 1, 2, 2, 4, 4).unwrap();
        assert_eq!(out.len(), 16);
        for v in out {
            assert_eq!(v, 5.0);
        }
    }

    #[test]
    fn upsample_single_pixel_broadcasts() {
        let out = bilinear_upsample(&[3.25], 1, 1, 1, 5, 7).unwrap();
        assert_eq!(out.len(), 35);
        for v in out {
            assert_eq!(v, 3.25);
        }
    }

    #[test]
    fn upsample_1x2_matches_scalar_reference() {
        // Independent evaluation of src = (i + 0.5) * in/out - 0.5 with clamping.
        let reference: Vec<f64> = (0..4)
            .map(|i| {
                let src = (i as f64 + 0.5) * 0.5 - 0.5;
                let x0 = src.floor();
                let f = src - x0;
                let lo = (x0.max(0.0) as usize).min(1);
                let hi = ((x0 + 1.0).max(0.0) as usize).min(1);
                let v = [0.0, 1.0];
                v[lo] * (1.0 - f) + v[hi] * f
            })
            .collect();
        let out = bilinear_upsample(&[0.0, 1.0], 1, 1, 2, 1, 4).unwrap();
        for (a, b) in out.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-15, "{out:?} vs {reference:?}");
        }
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn upsample_zero_target_is_shape_error() {
        assert!(matches!(
            bilinear_upsample(&[1.0], 1, 1, 1, 0, 4),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![f64::INFINITY, 0.0]),
            Err(Error::Validation(_))
        ));
    }
}
