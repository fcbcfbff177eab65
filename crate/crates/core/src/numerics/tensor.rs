//! Dense row-major tensor with wide (f64) elements and the matmul/elementwise
//! kernels the rest of the engine is built on.
//!
//! Tensors are immutable values once constructed; kernels return fresh
//! tensors. Dot products always accumulate in f64 and only *storage* may be
//! rounded to bf16 via the precision tag.

use serde::{Deserialize, Serialize};

use super::bf16::bf16_round;
use crate::numerics::NumericsError;

/// Storage precision of a tensor's elements.
///
/// `Bf16Storage` guarantees every element is exactly bf16-representable;
/// arithmetic still happens in f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    Wide,
    Bf16Storage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            precision: Precision::Wide,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::ShapeDataMismatch {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            precision: Precision::Wide,
        })
    }

    /// 2-D constructor from nested rows; rows must be equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(NumericsError::RaggedRows);
        }
        Tensor::from_vec(&[r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Number of rows when viewed as a matrix (1-D tensors are one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    /// Bounds-checked element access by multi-dimensional index.
    pub fn get(&self, index: &[usize]) -> Result<f64, NumericsError> {
        if index.len() != self.shape.len()
            || index.iter().zip(&self.shape).any(|(i, s)| i >= s)
        {
            return Err(NumericsError::IndexOutOfBounds {
                index: index.to_vec(),
                shape: self.shape.clone(),
            });
        }
        let mut flat = 0;
        for (i, s) in index.iter().zip(&self.shape) {
            flat = flat * s + i;
        }
        Ok(self.data[flat])
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows() && c < self.cols());
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Round every element to bf16 and tag the tensor as bf16 storage.
    pub fn to_bf16_storage(mut self) -> Self {
        for v in &mut self.data {
            *v = bf16_round(*v);
        }
        self.precision = Precision::Bf16Storage;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            precision: Precision::Wide,
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self, NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
            precision: Precision::Wide,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self, NumericsError> {
        self.add(&other.scale(-1.0))
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
            precision: Precision::Wide,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Same data, new shape; panics if the element count differs.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape must preserve element count"
        );
        self.shape = shape.to_vec();
        self
    }
}

fn check_matmul_dims(
    a_cols: usize,
    b_rows: usize,
    a_shape: &[usize],
    b_shape: &[usize],
) -> Result<(), NumericsError> {
    if a_cols != b_rows {
        return Err(NumericsError::ShapeMismatch {
            left: a_shape.to_vec(),
            right: b_shape.to_vec(),
        });
    }
    Ok(())
}

/// `a [m,k] x b [k,n] -> [m,n]`, accumulated in f64.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = (a.rows(), a.cols());
    let (bk, n) = (b.rows(), b.cols());
    check_matmul_dims(k, bk, a.shape(), b.shape())?;
    let mut out = vec![0.0; m * n];
    // ikj loop order: the inner loop streams contiguous rows of b and out.
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
        precision: Precision::Wide,
    })
}

/// `a [m,k] x b^T` where `b` is `[n,k]` -> `[m,n]`. Both operands stream
/// row-contiguously, so this is the fast path for `y = x W^T` layers.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = (a.rows(), a.cols());
    let (n, bk) = (b.rows(), b.cols());
    check_matmul_dims(k, bk, a.shape(), b.shape())?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = a.row(i);
        for j in 0..n {
            let b_row = b.row(j);
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
        precision: Precision::Wide,
    })
}

/// `a^T x b` where `a` is `[k,m]`, `b` is `[k,n]` -> `[m,n]`. Used for
/// weight-gradient products `dW = dy^T x`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (ak, m) = (a.rows(), a.cols());
    let (bk, n) = (b.rows(), b.cols());
    check_matmul_dims(ak, bk, a.shape(), b.shape())?;
    let mut out = vec![0.0; m * n];
    for kk in 0..ak {
        let a_row = a.row(kk);
        let b_row = b.row(kk);
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
        precision: Precision::Wide,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_must_agree() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn element_access_is_bounds_checked() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.get(&[1, 0]).unwrap(), 3.0);
        assert!(t.get(&[2, 0]).is_err());
        assert!(t.get(&[0]).is_err());
    }

    #[test]
    fn identity_matmul_is_exact() {
        let m = Tensor::from_vec(&[3, 3], (0..9).map(|v| v as f64 * 0.37 - 1.1).collect())
            .unwrap();
        let i3 = Tensor::identity(3);
        assert_eq!(matmul(&i3, &m).unwrap().data(), m.data());
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    /// Naive triple-loop oracle, written independently of the kernels above.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.data()[i * k + kk] * b.data()[kk * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::numerics::Rng::new(7);
        let a = crate::numerics::sample_normal(&mut rng, 25, 0.0, 1.0)
            .reshaped(&[5, 5]);
        let b = crate::numerics::sample_normal(&mut rng, 25, 0.0, 1.0)
            .reshaped(&[5, 5]);
        let got = matmul(&a, &b).unwrap();
        let want = matmul_oracle(&a, &b);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn transposed_variants_match_plain_matmul() {
        let mut rng = crate::numerics::Rng::new(11);
        let a = crate::numerics::sample_normal(&mut rng, 12, 0.0, 1.0).reshaped(&[3, 4]);
        let b = crate::numerics::sample_normal(&mut rng, 20, 0.0, 1.0).reshaped(&[5, 4]);
        let nt = matmul_nt(&a, &b).unwrap();
        let plain = matmul(&a, &b.transpose()).unwrap();
        for (x, y) in nt.data().iter().zip(plain.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = crate::numerics::sample_normal(&mut rng, 12, 0.0, 1.0).reshaped(&[4, 3]);
        let d = crate::numerics::sample_normal(&mut rng, 8, 0.0, 1.0).reshaped(&[4, 2]);
        let tn = matmul_tn(&c, &d).unwrap();
        let plain = matmul(&c.transpose(), &d).unwrap();
        for (x, y) in tn.data().iter().zip(plain.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bf16_storage_rounds_every_element() {
        let t = Tensor::from_vec(&[3], vec![1.0, 1.0 + f64::powi(2.0, -8), 0.1]).unwrap();
        let t = t.to_bf16_storage();
        assert_eq!(t.precision(), Precision::Bf16Storage);
        assert_eq!(t.data()[1], 1.0);
        for &v in t.data() {
            assert_eq!(bf16_round(v), v);
        }
    }

    #[test]
    fn nan_propagates_through_matmul() {
        let a = Tensor::from_vec(&[1, 2], vec![f64::NAN, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
        assert!(matmul(&a, &b).unwrap().data()[0].is_nan());
    }
}
