use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. `f64` is used for gradient verification,
/// `f32` for training.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// Bytes per element in the checkpoint encoding.
    const BYTES: usize;
    const DTYPE: &'static str;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
    /// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k` when `trans_b`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

macro_rules! strides {
    ($trans:expr, $rows:expr, $cols:expr) => {
        if $trans {
            (1isize, $rows as isize)
        } else {
            ($cols as isize, 1isize)
        }
    };
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const DTYPE: &'static str = "f32";

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        trans_a: bool,
        b: &[f32],
        trans_b: bool,
        c: &mut [f32],
        accumulate: bool,
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        let (rsa, csa) = strides!(trans_a, m, k);
        let (rsb, csb) = strides!(trans_b, k, n);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: slice lengths are checked above and strides describe
        // in-bounds row-major (or transposed) layouts of those slices.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const DTYPE: &'static str = "f64";

    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        trans_a: bool,
        b: &[f64],
        trans_b: bool,
        c: &mut [f64],
        accumulate: bool,
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        let (rsa, csa) = strides!(trans_a, m, k);
        let (rsb, csb) = strides!(trans_b, k, n);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(x: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::from_f64(x)).collect())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_f64(&[r, c], &flat)
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Rows of a rank-2 tensor as `f64` vectors.
    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        let c = self.last_dim();
        self.data
            .chunks(c)
            .map(|r| r.iter().map(|x| x.as_f64()).collect())
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }
}

/// Boolean attention mask of shape `(groups, rows, cols)`; `true` means the
/// position may be attended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    groups: usize,
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn new(groups: usize, rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != groups * rows * cols {
            return Err(Error::shape(
                "mask",
                format!("{groups}x{rows}x{cols} needs {} entries, got {}", groups * rows * cols, allow.len()),
            ));
        }
        Ok(Mask {
            groups,
            rows,
            cols,
            allow,
        })
    }

    /// Key-padding mask: every query row of group `g` may see the first
    /// `lengths[g]` columns.
    pub fn key_padding(lengths: &[usize], rows: usize, cols: usize) -> Self {
        let mut allow = Vec::with_capacity(lengths.len() * rows * cols);
        for &len in lengths {
            for _ in 0..rows {
                allow.extend((0..cols).map(|c| c < len));
            }
        }
        Mask {
            groups: lengths.len(),
            rows,
            cols,
            allow,
        }
    }

    /// Lower-triangular mask for autoregressive self-attention.
    pub fn causal(groups: usize, len: usize) -> Self {
        let mut allow = Vec::with_capacity(groups * len * len);
        for _ in 0..groups {
            for r in 0..len {
                allow.extend((0..len).map(|c| c <= r));
            }
        }
        Mask {
            groups,
            rows: len,
            cols: len,
            allow,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.groups, self.rows, self.cols)
    }

    pub fn allowed(&self, group: usize, row: usize, col: usize) -> bool {
        self.allow[(group * self.rows + row) * self.cols + col]
    }

    pub(crate) fn row(&self, group: usize, row: usize) -> &[bool] {
        let start = (group * self.rows + row) * self.cols;
        &self.allow[start..start + self.cols]
    }
}
