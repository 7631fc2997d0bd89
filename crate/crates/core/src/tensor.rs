//! Dense row-major tensors, the scalar trait shared by the single- and
//! double-precision compute paths, and the named-parameter plumbing used by
//! every trainable component.

use std::fmt;
use std::iter::Sum;

use rayon::prelude::*;
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape must have at least one dimension")]
    EmptyShape,
    #[error("dimension {index} of shape {shape:?} is zero")]
    ZeroDim { index: usize, shape: Vec<usize> },
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: input must be positive")]
    NonPositive { op: &'static str },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("loss must be a single value, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; run a fresh forward pass")]
    GraphConsumed,
    #[error("finite-difference step must be positive")]
    NonPositiveStep,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Which floating-point type a graph computes in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Scalar type for tensors. Implemented for `f32` (storage and training) and
/// `f64` (finite-difference checks).
pub trait Float:
    num_traits::Float + Default + Send + Sync + fmt::Debug + fmt::Display + Sum + 'static
{
    const PRECISION: Precision;

    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` on strided matrices.
    ///
    /// # Safety
    /// Strides and dimensions must describe valid regions of the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Float for f32 {
    const PRECISION: Precision = Precision::Single;
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Float for f64 {
    const PRECISION: Precision = Precision::Double;
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

const GEMM_ROW_BLOCK: usize = 64;
const GEMM_PARALLEL_WORK: usize = 1 << 18;

/// `c (+)= op(a) · op(b)` where `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
///
/// Rows of `c` are split into fixed-size blocks that may run on different
/// threads; each output element is produced by the same kernel call sequence
/// regardless of thread count, so results are reproducible bit for bit.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let run = |row0: usize, rows: usize, c_block: &mut [T]| {
        let a_off = if trans_a { row0 } else { row0 * k };
        // SAFETY: the block covers rows [row0, row0 + rows) of op(a) and the
        // matching rows of c; all strides stay inside the checked slices.
        unsafe {
            T::raw_gemm(
                rows,
                k,
                n,
                a.as_ptr().add(a_off),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c_block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m * k * n < GEMM_PARALLEL_WORK || m <= GEMM_ROW_BLOCK {
        run(0, m, c);
    } else {
        c.par_chunks_mut(GEMM_ROW_BLOCK * n)
            .enumerate()
            .for_each(|(blk, c_block)| {
                let rows = c_block.len() / n;
                run(blk * GEMM_ROW_BLOCK, rows, c_block);
            });
    }
}

/// Initial contents for [`Tensor::new`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill {
    Zeros,
    Constant(f64),
    Gaussian { mean: f64, std: f64, seed: u64 },
}

/// Dense tensor with an optional gradient buffer.
///
/// A tensor with `requires_grad == false` never holds a gradient buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .finish_non_exhaustive()
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(TensorError::EmptyShape);
    }
    if let Some(index) = shape.iter().position(|&d| d == 0) {
        return Err(TensorError::ZeroDim {
            index,
            shape: shape.to_vec(),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], fill: Fill) -> Result<Self> {
        let len = check_shape(shape)?;
        let data = match fill {
            Fill::Zeros => vec![T::zero(); len],
            Fill::Constant(c) => vec![T::of(c); len],
            Fill::Gaussian { mean, std, seed } => {
                let mut rng = Rng::seeded(seed);
                (0..len)
                    .map(|_| T::of(mean + std * rng.gaussian()))
                    .collect()
            }
        };
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected = check_shape(shape)?;
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    /// Zero tensor; `shape` must be valid (used for shapes derived from
    /// validated configs).
    pub(crate) fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, Fill::Zeros).expect("shape derived from a validated config")
    }

    pub(crate) fn ones(shape: &[usize]) -> Self {
        Self::new(shape, Fill::Constant(1.0)).expect("shape derived from a validated config")
    }

    /// Gaussian tensor drawn from a shared stream.
    pub(crate) fn gaussian(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let len = check_shape(shape).expect("shape derived from a validated config");
        let data = (0..len).map(|_| T::of(std * rng.gaussian())).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turning gradient tracking off also drops any gradient buffer.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.set_requires_grad(on);
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer. No-op on frozen tensors.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        if !self.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &x)| *b = *b + x),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub(crate) fn grad_mut(&mut self) -> Option<&mut Vec<T>> {
        self.grad.as_mut()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// True when both tensors have the same shape and bit-identical values.
    pub fn bits_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.f64().to_bits() == b.f64().to_bits())
    }

    /// 64-bit FNV-1a digest of shape and value bits.
    pub fn digest(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        for &d in &self.shape {
            h.write_u64(d as u64);
        }
        for &x in &self.data {
            h.write_u64(x.f64().to_bits());
        }
        h.finish()
    }
}

/// Components that own named tensors.
pub trait HasParams<T: Float> {
    fn params(&self) -> Vec<(String, &Tensor<T>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    fn trainable_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.len())
            .sum()
    }

    fn set_trainable(&mut self, on: bool) {
        for (_, t) in self.params_mut() {
            t.set_requires_grad(on);
        }
    }

    fn zero_grads(&mut self) {
        for (_, t) in self.params_mut() {
            t.zero_grad();
        }
    }

    /// Per-tensor digests keyed by name, in visiting order.
    fn digests(&self) -> Vec<(String, u64)> {
        self.params()
            .into_iter()
            .map(|(n, t)| (n, t.digest()))
            .collect()
    }
}

pub(crate) fn prefixed<'a, T>(
    prefix: &str,
    items: Vec<(String, &'a Tensor<T>)>,
) -> Vec<(String, &'a Tensor<T>)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

pub(crate) fn prefixed_mut<'a, T>(
    prefix: &str,
    items: Vec<(String, &'a mut Tensor<T>)>,
) -> Vec<(String, &'a mut Tensor<T>)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}
