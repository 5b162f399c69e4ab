use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. Most of the crate works with rank-2 views where
/// `rows = dims[0]` and `cols = product(dims[1..])`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    dims: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(dims: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", n, data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn filled(dims: &[usize], v: F) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![v; n],
        }
    }

    /// Rank-2 constructor; panics on a length mismatch (internal use with known shapes).
    pub fn from_rows(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(rows * cols, data.len(), "from_rows: {rows}x{cols} vs {}", data.len());
        Self {
            dims: vec![rows, cols],
            data,
        }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }

    /// 1×n row matrix.
    pub fn row_vector(data: Vec<F>) -> Self {
        Self {
            dims: vec![1, data.len()],
            data,
        }
    }

    pub fn scalar(v: F) -> Self {
        Self {
            dims: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(dims.to_vec(), data.iter().map(|&v| F::lit(v)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.dims.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.dims.is_empty() {
            1
        } else {
            self.dims[1..].iter().product()
        }
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", n, self.data.len()));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.data
            .iter()
            .zip(&other.data)
            .fold(F::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::shape("zip_map", format!("{:?}", self.dims), format!("{:?}", other.dims)));
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn dot(&self, other: &Self) -> F {
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn norm(&self) -> F {
        self.dot(self).sqrt()
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_rows(c, r, out)
    }

    /// `self[m×k] · other[k×n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner {k}"), format!("inner {k2}")));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_nn(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self::from_rows(m, n, out))
    }

    /// `self[m×k] · other[n×k]ᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("inner {k}"), format!("inner {k2}")));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_nt(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self::from_rows(m, n, out))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        let c = self.cols();
        Self::from_rows(len, c, self.data[start * c..(start + len) * c].to_vec())
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::from_rows(idx.len(), c, data)
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let c = parts.first().map(|p| p.cols()).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(Error::shape("concat_rows", c, p.cols()));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_rows(rows, c, data))
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn matmul_nn<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_tn<F: Scalar>(a: &[F], b: &[F], out: &mut [F], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::<f64>::from_rows(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::<f64>::from_rows(3, 2, vec![7., 8., 9., 10., 11., 12.]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        let c2 = a.matmul_t(&b.transpose()).unwrap();
        assert_eq!(c, c2);
        let mut c3 = vec![0.0; 4];
        matmul_tn(a.transpose().data(), b.data(), &mut c3, 3, 2, 2);
        assert_eq!(c3, c.data());
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
