//! Dense 4-D tensors in NCHW layout.
//!
//! The tensor type is deliberately small: contiguous storage, two dtypes
//! (f32 for training throughput, f64 for gradient checking and simulation),
//! and only the operations the rest of the crate actually needs. Kernels that
//! want to be generic over the element type use the [`Element`] trait;
//! everything else goes through the f64 accessors.
//!
//! Reductions ([`Tensor::flat_dot`], [`Tensor::flat_norm`], [`Tensor::mean`])
//! accumulate in f64 regardless of the storage dtype so that downstream
//! tolerance checks are not at the mercy of f32 summation error.

use crate::error::{Error, Result};

/// Element dtype of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

/// Shape of a 4-D tensor: batch, channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4 { n, c, h, w }
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of element (n, c, y, x) in row-major NCHW order.
    #[inline(always)]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl From<(usize, usize, usize, usize)> for Shape4 {
    fn from(t: (usize, usize, usize, usize)) -> Shape4 {
        Shape4::new(t.0, t.1, t.2, t.3)
    }
}

/// Backing storage; one contiguous buffer per tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// Scalar types a tensor can hold. Sealed in practice: only f32 and f64
/// implement it, and the rest of the crate relies on that.
pub trait Element: Copy + Send + Sync + PartialOrd + std::fmt::Debug + 'static {
    const DTYPE: DType;
    const ZERO: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn slice(storage: &Storage) -> Option<&[Self]>;
    fn slice_mut(storage: &mut Storage) -> Option<&mut [Self]>;
    fn into_storage(v: Vec<Self>) -> Storage;
    fn madd(self, a: Self, b: Self) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    const ZERO: f32 = 0.0;
    #[inline(always)]
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn slice(storage: &Storage) -> Option<&[f32]> {
        match storage {
            Storage::F32(v) => Some(v),
            Storage::F64(_) => None,
        }
    }
    fn slice_mut(storage: &mut Storage) -> Option<&mut [f32]> {
        match storage {
            Storage::F32(v) => Some(v),
            Storage::F64(_) => None,
        }
    }
    fn into_storage(v: Vec<f32>) -> Storage {
        Storage::F32(v)
    }
    #[inline(always)]
    fn madd(self, a: f32, b: f32) -> f32 {
        // Plain multiply-then-add, *not* fused: results must be identical
        // between vectorized and scalar code paths.
        self * a + b
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    const ZERO: f64 = 0.0;
    #[inline(always)]
    fn from_f64(v: f64) -> f64 {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    fn slice(storage: &Storage) -> Option<&[f64]> {
        match storage {
            Storage::F64(v) => Some(v),
            Storage::F32(_) => None,
        }
    }
    fn slice_mut(storage: &mut Storage) -> Option<&mut [f64]> {
        match storage {
            Storage::F64(v) => Some(v),
            Storage::F32(_) => None,
        }
    }
    fn into_storage(v: Vec<f64>) -> Storage {
        Storage::F64(v)
    }
    #[inline(always)]
    fn madd(self, a: f64, b: f64) -> f64 {
        self * a + b
    }
}

/// A dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape4,
    storage: Storage,
}

impl Tensor {
    /// A tensor of the given shape filled with `fill` (cast to `dtype`).
    /// Zero-sized dimensions are rejected: nothing downstream can use them.
    pub fn filled(shape: impl Into<Shape4>, fill: f64, dtype: DType) -> Result<Tensor> {
        let shape = shape.into();
        if shape.is_empty() {
            return Err(Error::Shape(format!(
                "tensor dimensions must be positive, got {shape}"
            )));
        }
        let storage = match dtype {
            DType::F32 => Storage::F32(vec![fill as f32; shape.len()]),
            DType::F64 => Storage::F64(vec![fill; shape.len()]),
        };
        Ok(Tensor { shape, storage })
    }

    /// All-zeros tensor.
    pub fn zeros(shape: impl Into<Shape4>, dtype: DType) -> Result<Tensor> {
        Tensor::filled(shape, 0.0, dtype)
    }

    /// Wrap an existing buffer. The buffer length must match the shape.
    pub fn from_vec<E: Element>(shape: impl Into<Shape4>, data: Vec<E>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.is_empty() {
            return Err(Error::Shape(format!(
                "tensor dimensions must be positive, got {shape}"
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "buffer of {} elements cannot fill shape {shape} ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Tensor {
            shape,
            storage: E::into_storage(data),
        })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.storage {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects zero-sized shapes
    }

    /// Borrow the storage as a slice of `E`; `None` if the dtype differs.
    pub fn as_slice<E: Element>(&self) -> Option<&[E]> {
        E::slice(&self.storage)
    }

    pub fn as_mut_slice<E: Element>(&mut self) -> Option<&mut [E]> {
        E::slice_mut(&mut self.storage)
    }

    /// Borrow as `E`, with a descriptive error when the dtype differs.
    pub fn try_slice<E: Element>(&self, what: &str) -> Result<&[E]> {
        self.as_slice::<E>().ok_or_else(|| {
            Error::Dtype(format!(
                "{what} expected {} but tensor holds {}",
                E::DTYPE,
                self.dtype()
            ))
        })
    }

    /// Element (n, c, y, x) widened to f64. Panics on out-of-range indices,
    /// matching slice indexing semantics; intended for tests and small code.
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let idx = self.checked_index(n, c, y, x);
        match &self.storage {
            Storage::F32(v) => v[idx] as f64,
            Storage::F64(v) => v[idx],
        }
    }

    /// Set element (n, c, y, x) from an f64 (cast to the storage dtype).
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) {
        let idx = self.checked_index(n, c, y, x);
        match &mut self.storage {
            Storage::F32(v) => v[idx] = value as f32,
            Storage::F64(v) => v[idx] = value,
        }
    }

    fn checked_index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        assert!(
            n < s.n && c < s.c && y < s.h && x < s.w,
            "index ({n}, {c}, {y}, {x}) out of range for shape {s}"
        );
        s.index(n, c, y, x)
    }

    /// The whole buffer widened to f64 (copies for f32 tensors).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.storage {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
        }
    }

    /// Convert to the requested dtype (no-op clone if it already matches).
    pub fn cast(&self, dtype: DType) -> Tensor {
        if self.dtype() == dtype {
            return self.clone();
        }
        let storage = match (&self.storage, dtype) {
            (Storage::F32(v), DType::F64) => Storage::F64(v.iter().map(|&x| x as f64).collect()),
            (Storage::F64(v), DType::F32) => Storage::F32(v.iter().map(|&x| x as f32).collect()),
            _ => unreachable!("dtype already matched"),
        };
        Tensor {
            shape: self.shape,
            storage,
        }
    }

    fn check_same_shape_dtype(&self, rhs: &Tensor, op: &str) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::Shape(format!(
                "{op} requires equal shapes, got {} and {}",
                self.shape, rhs.shape
            )));
        }
        if self.dtype() != rhs.dtype() {
            return Err(Error::Dtype(format!(
                "{op} requires equal dtypes, got {} and {}",
                self.dtype(),
                rhs.dtype()
            )));
        }
        Ok(())
    }

    /// Elementwise sum. Shapes and dtypes must match exactly.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.check_same_shape_dtype(rhs, "add")?;
        Ok(self.zip_with(rhs, |a, b| a + b))
    }

    /// Elementwise difference (`self - rhs`).
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.check_same_shape_dtype(rhs, "sub")?;
        Ok(self.zip_with(rhs, |a, b| a - b))
    }

    fn zip_with(&self, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let storage = match (&self.storage, &rhs.storage) {
            (Storage::F32(a), Storage::F32(b)) => Storage::F32(
                a.iter()
                    .zip(b)
                    .map(|(&x, &y)| f(x as f64, y as f64) as f32)
                    .collect(),
            ),
            (Storage::F64(a), Storage::F64(b)) => {
                Storage::F64(a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
            }
            _ => unreachable!("dtypes already checked"),
        };
        Tensor {
            shape: self.shape,
            storage,
        }
    }

    /// Multiply every element by a scalar.
    pub fn scale(&self, factor: f64) -> Tensor {
        let storage = match &self.storage {
            Storage::F32(v) => Storage::F32(v.iter().map(|&x| (x as f64 * factor) as f32).collect()),
            Storage::F64(v) => Storage::F64(v.iter().map(|&x| x * factor).collect()),
        };
        Tensor {
            shape: self.shape,
            storage,
        }
    }

    /// Concatenate along the channel axis. All parts must agree in batch,
    /// height, width, and dtype; the output channel count is the sum.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (n, h, w) = (first.shape.n, first.shape.h, first.shape.w);
        let dtype = first.dtype();
        let mut c_total = 0;
        for t in parts {
            if t.shape.n != n || t.shape.h != h || t.shape.w != w {
                return Err(Error::Shape(format!(
                    "concat parts must share batch/height/width, got {} vs {}",
                    first.shape, t.shape
                )));
            }
            if t.dtype() != dtype {
                return Err(Error::Dtype(format!(
                    "concat parts must share dtype, got {} and {}",
                    dtype,
                    t.dtype()
                )));
            }
            c_total += t.shape.c;
        }
        let out_shape = Shape4::new(n, c_total, h, w);
        let mut out = Tensor::zeros(out_shape, dtype)?;
        let plane = h * w;
        for b in 0..n {
            let mut c_off = 0;
            for t in parts {
                let src_start = t.shape.index(b, 0, 0, 0);
                let src_len = t.shape.c * plane;
                let dst_start = out_shape.index(b, c_off, 0, 0);
                match (&mut out.storage, &t.storage) {
                    (Storage::F32(dst), Storage::F32(src)) => {
                        dst[dst_start..dst_start + src_len]
                            .copy_from_slice(&src[src_start..src_start + src_len]);
                    }
                    (Storage::F64(dst), Storage::F64(src)) => {
                        dst[dst_start..dst_start + src_len]
                            .copy_from_slice(&src[src_start..src_start + src_len]);
                    }
                    _ => unreachable!("dtypes already checked"),
                }
                c_off += t.shape.c;
            }
        }
        Ok(out)
    }

    /// Copy channels `[start, start + count)` into a new tensor.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Tensor> {
        if count == 0 || start + count > self.shape.c {
            return Err(Error::Shape(format!(
                "channel slice [{start}, {}) out of range for {} channels",
                start + count,
                self.shape.c
            )));
        }
        let out_shape = Shape4::new(self.shape.n, count, self.shape.h, self.shape.w);
        let mut out = Tensor::zeros(out_shape, self.dtype())?;
        let plane = self.shape.h * self.shape.w;
        for b in 0..self.shape.n {
            let src_start = self.shape.index(b, start, 0, 0);
            let dst_start = out_shape.index(b, 0, 0, 0);
            let len = count * plane;
            match (&mut out.storage, &self.storage) {
                (Storage::F32(dst), Storage::F32(src)) => {
                    dst[dst_start..dst_start + len]
                        .copy_from_slice(&src[src_start..src_start + len]);
                }
                (Storage::F64(dst), Storage::F64(src)) => {
                    dst[dst_start..dst_start + len]
                        .copy_from_slice(&src[src_start..src_start + len]);
                }
                _ => unreachable!("same tensor dtype"),
            }
        }
        Ok(out)
    }

    /// Dot product over flattened elements, accumulated in f64.
    pub fn flat_dot(&self, rhs: &Tensor) -> Result<f64> {
        self.check_same_shape_dtype(rhs, "flat_dot")?;
        let sum = match (&self.storage, &rhs.storage) {
            (Storage::F32(a), Storage::F32(b)) => a
                .iter()
                .zip(b)
                .fold(0.0f64, |acc, (&x, &y)| acc + x as f64 * y as f64),
            (Storage::F64(a), Storage::F64(b)) => {
                a.iter().zip(b).fold(0.0f64, |acc, (&x, &y)| acc + x * y)
            }
            _ => unreachable!("dtypes already checked"),
        };
        Ok(sum)
    }

    /// Euclidean norm over flattened elements, accumulated in f64.
    pub fn flat_norm(&self) -> f64 {
        let sum = match &self.storage {
            Storage::F32(v) => v.iter().fold(0.0f64, |acc, &x| acc + (x as f64) * (x as f64)),
            Storage::F64(v) => v.iter().fold(0.0f64, |acc, &x| acc + x * x),
        };
        sum.sqrt()
    }

    /// Mean over all elements, accumulated in f64.
    pub fn mean(&self) -> f64 {
        let sum = match &self.storage {
            Storage::F32(v) => v.iter().fold(0.0f64, |acc, &x| acc + x as f64),
            Storage::F64(v) => v.iter().fold(0.0f64, |acc, &x| acc + x),
        };
        sum / self.len() as f64
    }

    /// Largest absolute element, widened to f64.
    pub fn max_abs(&self) -> f64 {
        match &self.storage {
            Storage::F32(v) => v.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs())),
            Storage::F64(v) => v.iter().fold(0.0f64, |m, &x| m.max(x.abs())),
        }
    }
}
