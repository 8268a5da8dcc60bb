//! Dense tensors with a reverse-mode tape.
//!
//! [`Tensor`] is a plain value container. Differentiable computations are
//! recorded on a [`Tape`] through [`Var`] handles; `Tape::backward` replays
//! the record in reverse insertion order and returns [`Gradients`].
//!
//! Broadcasting follows the NumPy trailing-dimension rule: shapes are
//! right-aligned and a dimension of extent 1 (or a missing leading dimension)
//! stretches to match the other operand.

mod conv;
mod ops;
mod tape;

pub use conv::ConvGeom;
pub use ops::{softmax_rows, Activation};
pub use tape::{Gradients, ParamKey, Tape, Var};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Element type. 64-bit by default; the `f32` feature switches the whole
/// crate to single precision.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
    requires_grad: bool,
    grad: Option<Vec<Real>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "extents must be positive".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("{} elements supplied", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("positive shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: Real) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_slice(values: &[Real]) -> Self {
        Self::new(vec![values.len()], values.to_vec()).expect("nonempty slice")
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: Real, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                v as Real * std
            })
            .collect();
        Self::new(shape.to_vec(), data).expect("positive shape")
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: Real, hi: Real, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| lo + (hi - lo) * rng.random::<f64>() as Real)
            .collect();
        Self::new(shape.to_vec(), data).expect("positive shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Real {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[Real]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[Real]) {
        assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let mut t = Self::new(shape.to_vec(), self.data.clone())?;
        t.requires_grad = self.requires_grad;
        Ok(t)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Result shape of broadcasting `a` against `b`, or `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each element of the broadcast output, the flat index of the source
/// element of an operand with shape `src`.
pub(crate) fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if src == out {
        return (0..n).collect();
    }
    let offset = out.len() - src.len();
    // Source strides aligned to the output rank; zero on broadcast dims.
    let mut strides = vec![0usize; out.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= src[i];
    }
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out.len()];
    let mut cur = 0usize;
    for _ in 0..n {
        idx.push(cur);
        for d in (0..out.len()).rev() {
            counter[d] += 1;
            cur += strides[d];
            if counter[d] < out[d] {
                break;
            }
            cur -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// `c (m×n) = op(a) (m×k) · op(b) (k×n)`, optionally accumulating into `c`.
/// `a_t`/`b_t` mean the operand is stored transposed (row-major).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    a_t: bool,
    b: &[Real],
    b_t: bool,
    c: &mut [Real],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe exactly the m×k, k×n and m×n row-major
    // buffers whose lengths are checked above.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

pub(crate) fn erf(x: Real) -> Real {
    #[cfg(not(feature = "f32"))]
    {
        libm::erf(x)
    }
    #[cfg(feature = "f32")]
    {
        libm::erff(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_data_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn broadcast_trailing_rule() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        assert_eq!(broadcast_index(&[3, 1], &[2, 3, 4])[..8], [0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(broadcast_index(&[4], &[2, 4])[..], [0, 1, 2, 3, 0, 1, 2, 3]);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
