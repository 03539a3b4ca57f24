use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of an [`Array`]. Implemented for `f32` (training) and `f64`
/// (gradient checking).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Checkpoint dtype code.
    const DTYPE: DType;

    /// `c = a · b (+ c if accumulate)` where `a` is `m×k` and `b` is `k×n`,
    /// each addressed through (row stride, column stride).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        accumulate: bool,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Lossless-enough conversion from `f64` constants.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }
}

/// Element type code stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U64 = 2,
    Utf8 = 3,
}

impl DType {
    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U64),
            3 => Some(DType::Utf8),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::U64 => 8,
            DType::Utf8 => 1,
        }
    }
}

fn check_gemm_bounds<T>(
    rows: usize,
    cols: usize,
    strides: (isize, isize),
    buf: &[T],
) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * strides.0 + (cols as isize - 1) * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < buf.len(),
        "gemm operand out of bounds"
    );
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_strides: (isize, isize),
        b: &[f32],
        b_strides: (isize, isize),
        c: &mut [f32],
        accumulate: bool,
    ) {
        check_gemm_bounds(m, k, a_strides, a);
        check_gemm_bounds(k, n, b_strides, b);
        assert!(c.len() >= m * n);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: operand extents were bounds-checked above; c is a dense m×n block.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_strides: (isize, isize),
        b: &[f64],
        b_strides: (isize, isize),
        c: &mut [f64],
        accumulate: bool,
    ) {
        check_gemm_bounds(m, k, a_strides, a);
        check_gemm_bounds(k, n, b_strides, b);
        assert!(c.len() >= m * n);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Real> Array<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Array::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Array {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![value; len],
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Array {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Array {
            shape: vec![data.len()],
            data,
            requires_grad: false,
        }
    }

    /// Builds an array from `f64` values, converting to `T`.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a single-element array.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    /// Converts element precision.
    pub fn cast<U: Real>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Array<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}
