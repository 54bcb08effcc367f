//! Dense row-major f64 tensors.
//!
//! Everything the model computes flows through this type. It is deliberately
//! minimal: owned `Vec<f64>` storage, explicit shapes, and the handful of
//! kernels the forecasting pipeline actually needs (matmul, axis softmax,
//! layer norm, transpose). No broadcasting — shape mismatches are errors
//! that name both shapes so they surface at the call site, not three layers
//! down.

use crate::error::{CoreError, Result};

/// Negative-infinity fill used to exclude entries from a softmax.
pub const NEG_INF: f64 = f64::NEG_INFINITY;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn shape_str(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

impl Tensor {
    /// Builds a tensor from a shape and flat row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::shape(
                "tensor::new",
                format!(
                    "shape {} implies {} elements but {} were provided",
                    shape_str(&shape),
                    numel,
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 2-D convenience constructor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(CoreError::shape(
                    "tensor::from_rows",
                    format!("row 0 has {} columns but row {} has {}", c, i, row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
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

    /// Number of rows when viewed as 2-D (rank must be 2).
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2, "rows() on rank-{} tensor", self.rank());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2, "cols() on rank-{} tensor", self.rank());
        self.shape[1]
    }

    /// 2-D element accessor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        debug_assert_eq!(self.rank(), 2);
        &mut self.data[i * self.shape[1] + j]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(CoreError::shape(
                "tensor::reshape",
                format!(
                    "cannot view {} ({} elements) as {}",
                    shape_str(&self.shape),
                    self.data.len(),
                    shape_str(&shape)
                ),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn abs_max(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(CoreError::shape(
                "matmul",
                format!(
                    "expected two rank-2 operands, got {} and {}",
                    shape_str(&self.shape),
                    shape_str(&other.shape)
                ),
            ));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(CoreError::shape(
                "matmul",
                format!(
                    "inner dimensions disagree: {} vs {}",
                    shape_str(&self.shape),
                    shape_str(&other.shape)
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transposed(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(CoreError::shape(
                "transpose",
                format!("expected rank-2 operand, got {}", shape_str(&self.shape)),
            ));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }
}

/// `out += a @ b` for row-major buffers; `a` is `m x k`, `b` is `k x n`.
/// ikj loop order keeps the inner accesses sequential.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// Softmax along one axis of an arbitrary-rank tensor.
///
/// Entries equal to `NEG_INF` are treated as excluded. A slice whose entries
/// are all excluded yields exact zeros rather than NaN, so downstream
/// aggregation of a fully masked slice contributes nothing.
pub fn softmax_over_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(CoreError::shape(
            "softmax_over_axis",
            format!("axis {} out of range for {}", axis, shape_str(&x.shape)),
        ));
    }
    let axis_len = x.shape[axis];
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            softmax_slice(&mut out, o, i, axis_len, inner);
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// In-place softmax over the strided slice `{(o*axis_len + j)*inner + i}`.
pub(crate) fn softmax_slice(data: &mut [f64], o: usize, i: usize, axis_len: usize, inner: usize) {
    let idx = |j: usize| (o * axis_len + j) * inner + i;
    let mut max = NEG_INF;
    for j in 0..axis_len {
        max = max.max(data[idx(j)]);
    }
    if max == NEG_INF {
        // fully excluded slice -> exact zeros
        for j in 0..axis_len {
            data[idx(j)] = 0.0;
        }
        return;
    }
    let mut sum = 0.0;
    for j in 0..axis_len {
        let e = if data[idx(j)] == NEG_INF {
            0.0
        } else {
            (data[idx(j)] - max).exp()
        };
        data[idx(j)] = e;
        sum += e;
    }
    for j in 0..axis_len {
        data[idx(j)] /= sum;
    }
}

/// Layer normalization over the last axis with learned gain and bias.
///
/// Each last-axis slice is shifted to zero mean and scaled to unit variance
/// (biased variance, `eps` inside the square root), then `gain` and `bias`
/// are applied elementwise.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x.shape.last().ok_or_else(|| {
        CoreError::shape("layer_norm", "input has rank 0".to_string())
    })?;
    if gain.len() != d || bias.len() != d {
        return Err(CoreError::shape(
            "layer_norm",
            format!(
                "last axis is {} but gain has {} and bias has {} entries",
                d,
                gain.len(),
                bias.len()
            ),
        ));
    }
    if eps <= 0.0 {
        return Err(CoreError::numeric(format!("layer_norm eps must be positive, got {eps}")));
    }
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let (mean, var) = mean_var(row);
        let denom = (var + eps).sqrt();
        for j in 0..d {
            out[r * d + j] = (row[j] - mean) / denom * gain.data[j] + bias.data[j];
        }
    }
    Tensor::new(x.shape.clone(), out)
}

pub(crate) fn mean_var(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn new_rejects_wrong_element_count() {
        let err = Tensor::new(vec![2, 3], vec![1.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2x3]"), "message should name the shape: {msg}");
        assert!(msg.contains('5'), "message should name the data length: {msg}");
    }

    #[test]
    fn matmul_known_product() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_is_noop() {
        let a = Tensor::from_rows(&[vec![1.5, -2.0, 0.25], vec![0.0, 3.0, 7.0]]).unwrap();
        let eye = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert_eq!(a.matmul(&eye).unwrap(), a);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2x3]") && msg.contains("[4x2]"), "got: {msg}");
    }

    #[test]
    fn matmul_with_zero_rows() {
        let a = Tensor::zeros(vec![0, 3]);
        let b = Tensor::zeros(vec![3, 4]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[0, 4]);
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let t = a.transposed().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.at(0, 1), 4.0);
        assert_eq!(t.transposed().unwrap(), a);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let x = Tensor::from_rows(&[vec![2.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let s = softmax_over_axis(&x, 1).unwrap();
        for &v in s.data() {
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_known_two_logit_value() {
        // softmax([0, ln 3]) = [0.25, 0.75]
        let x = Tensor::new(vec![1, 2], vec![0.0, 3.0f64.ln()]).unwrap();
        let s = softmax_over_axis(&x, 1).unwrap();
        assert_abs_diff_eq!(s.data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s.data()[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn softmax_axis0_normalizes_columns() {
        let x = Tensor::from_rows(&[vec![1.0, -4.0], vec![2.0, 1.0], vec![3.0, 0.5]]).unwrap();
        let s = softmax_over_axis(&x, 0).unwrap();
        for j in 0..2 {
            let col: f64 = (0..3).map(|i| s.at(i, j)).sum();
            assert_abs_diff_eq!(col, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_excluded_entries_are_exact_zero() {
        let x = Tensor::new(vec![1, 3], vec![1.0, NEG_INF, 2.0]).unwrap();
        let s = softmax_over_axis(&x, 1).unwrap();
        assert_eq!(s.data()[1], 0.0);
        assert_abs_diff_eq!(s.data()[0] + s.data()[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_fully_masked_slice_is_all_zero() {
        let x = Tensor::new(vec![1, 3], vec![NEG_INF; 3]).unwrap();
        let s = softmax_over_axis(&x, 1).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let x = Tensor::new(vec![1, 2], vec![1e4, 1e4 - 5.0]).unwrap();
        let s = softmax_over_axis(&x, 1).unwrap();
        assert!(s.all_finite());
        assert_abs_diff_eq!(s.data()[0] + s.data()[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-5.0, 0.0, 5.0, 10.0]]).unwrap();
        let gain = Tensor::full(vec![4], 1.0);
        let bias = Tensor::zeros(vec![4]);
        let y = layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        for r in 0..2 {
            let row: Vec<f64> = (0..4).map(|j| y.at(r, j)).collect();
            let (mean, var) = mean_var(&row);
            assert!(mean.abs() < 1e-7, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row {r} var {var}");
        }
    }

    #[test]
    fn layer_norm_applies_gain_and_bias() {
        let x = Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap();
        let gain = Tensor::new(vec![2], vec![3.0, 3.0]).unwrap();
        let bias = Tensor::new(vec![2], vec![10.0, 10.0]).unwrap();
        let y = layer_norm(&x, &gain, &bias, 1e-12).unwrap();
        // normalized row is [-1, 1] up to eps
        assert_abs_diff_eq!(y.data()[0], 7.0, epsilon = 1e-6);
        assert_abs_diff_eq!(y.data()[1], 13.0, epsilon = 1e-6);
    }

    #[test]
    fn layer_norm_shape_error_names_sizes() {
        let x = Tensor::zeros(vec![2, 4]);
        let gain = Tensor::zeros(vec![3]);
        let bias = Tensor::zeros(vec![4]);
        let msg = layer_norm(&x, &gain, &bias, 1e-5).unwrap_err().to_string();
        assert!(msg.contains('4') && msg.contains('3'), "got: {msg}");
    }

    proptest! {
        #[test]
        fn softmax_rows_always_stochastic(rows in 1usize..5, cols in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-8.0..8.0)).collect();
            let x = Tensor::new(vec![rows, cols], data).unwrap();
            let s = softmax_over_axis(&x, 1).unwrap();
            for r in 0..rows {
                let sum: f64 = (0..cols).map(|c| s.at(r, c)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                for c in 0..cols {
                    prop_assert!(s.at(r, c) >= 0.0);
                }
            }
        }

        #[test]
        fn matmul_distributes_over_addition(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let mut mk = |r: usize, c: usize| {
                let data: Vec<f64> = (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect();
                Tensor::new(vec![r, c], data).unwrap()
            };
            let a = mk(3, 4);
            let b = mk(4, 2);
            let c = mk(4, 2);
            let bc_data: Vec<f64> = b.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
            let bc = Tensor::new(vec![4, 2], bc_data).unwrap();
            let lhs = a.matmul(&bc).unwrap();
            let ab = a.matmul(&b).unwrap();
            let ac = a.matmul(&c).unwrap();
            for i in 0..lhs.len() {
                prop_assert!((lhs.data()[i] - ab.data()[i] - ac.data()[i]).abs() < 1e-9);
            }
        }
    }
}
