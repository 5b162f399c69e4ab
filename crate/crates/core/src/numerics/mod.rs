//! Dense linear algebra, masked softmax, normalization and the finite-difference
//! oracle used to validate every analytic gradient in the crate.

mod tensor;

pub(crate) use tensor::{matmul_nn, matmul_nt, matmul_tn};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stand-in for `-inf` inside exponentiation.
pub const NEG_INF_SURROGATE: f64 = -1e30;

/// Two-valued additive attention mask: every entry is `0` or `-inf`.
///
/// Stored as a blocked bitmap so the two-valued domain holds by construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdditiveMask {
    rows: usize,
    cols: usize,
    blocked: Vec<bool>,
}

impl AdditiveMask {
    pub fn open(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            blocked: vec![false; rows * cols],
        }
    }

    pub fn blocked(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            blocked: vec![true; rows * cols],
        }
    }

    pub fn from_blocked(rows: usize, cols: usize, blocked: Vec<bool>) -> Result<Self> {
        if blocked.len() != rows * cols {
            return Err(Error::shape("AdditiveMask", rows * cols, blocked.len()));
        }
        Ok(Self { rows, cols, blocked })
    }

    /// A 1×n mask that is open exactly where `open[j]` holds.
    pub fn row_from_open(open: &[bool]) -> Self {
        Self {
            rows: 1,
            cols: open.len(),
            blocked: open.iter().map(|o| !o).collect(),
        }
    }

    /// Parse additive values; rejects anything other than `0` and `-inf`.
    pub fn from_values<F: Scalar>(values: &Tensor<F>) -> Result<Self> {
        let mut blocked = Vec::with_capacity(values.len());
        for &v in values.data() {
            if v == F::zero() {
                blocked.push(false);
            } else if v == F::neg_infinity() {
                blocked.push(true);
            } else {
                return Err(Error::range("AdditiveMask::from_values", format!("entry {v} not in {{0, -inf}}")));
            }
        }
        Self::from_blocked(values.rows(), values.cols(), blocked)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_blocked(&self, r: usize, c: usize) -> bool {
        self.blocked[r * self.cols + c]
    }

    pub fn set_blocked(&mut self, r: usize, c: usize, blocked: bool) {
        self.blocked[r * self.cols + c] = blocked;
    }

    pub fn value<F: Scalar>(&self, r: usize, c: usize) -> F {
        if self.is_blocked(r, c) {
            F::neg_infinity()
        } else {
            F::zero()
        }
    }

    pub fn to_values<F: Scalar>(&self) -> Tensor<F> {
        let data = self
            .blocked
            .iter()
            .map(|&b| if b { F::neg_infinity() } else { F::zero() })
            .collect();
        Tensor::from_rows(self.rows, self.cols, data)
    }

    /// True when the whole row is blocked.
    pub fn row_blocked(&self, r: usize) -> bool {
        self.blocked[r * self.cols..(r + 1) * self.cols].iter().all(|&b| b)
    }

    /// Elementwise sum of additive masks (blocked if either is blocked).
    pub fn combine(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                "AdditiveMask::combine",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let blocked = self.blocked.iter().zip(&other.blocked).map(|(a, b)| *a || *b).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            blocked,
        })
    }

    pub fn open_count(&self) -> usize {
        self.blocked.iter().filter(|b| !**b).count()
    }
}

/// Row-wise softmax of `logits + mask`. Blocked entries are exactly zero and a
/// fully blocked row yields the zero vector.
pub fn masked_softmax<F: Scalar>(logits: &Tensor<F>, mask: &AdditiveMask) -> Result<Tensor<F>> {
    if logits.rows() != mask.rows() || logits.cols() != mask.cols() {
        return Err(Error::shape(
            "masked_softmax",
            format!("{}x{}", mask.rows(), mask.cols()),
            format!("{}x{}", logits.rows(), logits.cols()),
        ));
    }
    let mut out = Tensor::zeros(&[logits.rows(), logits.cols()]);
    for r in 0..logits.rows() {
        softmax_row_into(logits.row(r), |c| mask.is_blocked(r, c), out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_row_into<F: Scalar>(row: &[F], blocked: impl Fn(usize) -> bool, out: &mut [F]) {
    let mut max = F::neg_infinity();
    for (c, &v) in row.iter().enumerate() {
        if !blocked(c) && v > max {
            max = v;
        }
    }
    if max == F::neg_infinity() {
        out.iter_mut().for_each(|o| *o = F::zero());
        return;
    }
    let mut sum = F::zero();
    for (c, (&v, o)) in row.iter().zip(out.iter_mut()).enumerate() {
        if blocked(c) {
            *o = F::zero();
        } else {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise layer normalization with affine gain and bias.
pub fn layer_norm<F: Scalar>(x: &Tensor<F>, gain: &Tensor<F>, bias: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(Error::shape("layer_norm", c, format!("gain {} bias {}", gain.len(), bias.len())));
    }
    if eps <= F::zero() {
        return Err(Error::range("layer_norm", "eps must be positive"));
    }
    let mut out = Tensor::zeros(&[x.rows(), c]);
    for r in 0..x.rows() {
        let (xhat, _) = normalize_row(x.row(r), eps);
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = xhat[j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(out)
}

/// Returns `(x - mean) / sqrt(var + eps)` and `1 / sqrt(var + eps)`.
pub(crate) fn normalize_row<F: Scalar>(row: &[F], eps: F) -> (Vec<F>, F) {
    let n = F::from_usize_lossy(row.len());
    let mean = row.iter().copied().sum::<F>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let inv = F::one() / (var + eps).sqrt();
    (row.iter().map(|&v| (v - mean) * inv).collect(), inv)
}

/// Cosine similarity of two equal-length vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity<F: Scalar>(a: &[F], b: &[F]) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", a.len(), b.len()));
    }
    let na = a.iter().map(|&v| v * v).sum::<F>().sqrt();
    let nb = b.iter().map(|&v| v * v).sum::<F>().sqrt();
    if na == F::zero() || nb == F::zero() {
        return Err(Error::degenerate("cosine_similarity", "zero-norm input"));
    }
    let dot: F = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    Ok((dot / (na * nb)).max(-F::one()).min(F::one()))
}

/// Central-difference gradient of a scalar function.
pub fn finite_difference_gradient<F: Scalar>(
    mut f: impl FnMut(&Tensor<F>) -> F,
    x: &Tensor<F>,
    h: F,
) -> Result<Tensor<F>> {
    if h <= F::zero() {
        return Err(Error::range("finite_difference_gradient", "h must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.dims());
    let two_h = h + h;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference_gradient",
            });
        }
        grad.data_mut()[i] = (fp - fm) / two_h;
    }
    Ok(grad)
}

/// Outcome of comparing an analytic gradient with a numeric one.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked_count: usize,
    pub pass: bool,
}

/// Componentwise comparison: a component passes when its relative error is
/// within `rtol` or its absolute error within `atol`.
pub fn gradient_check<F: Scalar>(analytic: &Tensor<F>, numeric: &Tensor<F>, rtol: f64, atol: f64) -> Result<GradReport> {
    if analytic.dims() != numeric.dims() {
        return Err(Error::shape(
            "gradient_check",
            format!("{:?}", analytic.dims()),
            format!("{:?}", numeric.dims()),
        ));
    }
    let mut report = GradReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked_count: 0,
        pass: true,
    };
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let (a, n) = (a.to_f64_lossy(), n.to_f64_lossy());
        let abs = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let rel = if scale == 0.0 { 0.0 } else { abs / scale };
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked_count += 1;
        if !(rel <= rtol || abs <= atol) {
            report.pass = false;
        }
    }
    Ok(report)
}
