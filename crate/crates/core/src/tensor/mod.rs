//! Dense row-major tensors and the hand-written layer primitives the U-Net
//! is composed from. Every primitive has an explicit backward pass; there is
//! no autograd graph.

mod activation;
mod conv;
mod gradcheck;
mod loss;
mod optim;
mod pool;
mod upsample;

pub use activation::{
    relu, relu_backward, sigmoid, sigmoid_backward, softmax_channels, softmax_channels_backward,
};
pub use conv::{conv2d_backward, conv2d_backward_opt, conv2d_forward, ConvGrads, ConvSpec};
pub use gradcheck::{gradcheck, GradcheckReport, ZERO_FLOOR};
pub use loss::cross_entropy_loss;
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use pool::{maxpool2d, maxpool2d_backward};
pub use upsample::{upsample_nearest, upsample_nearest_backward};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};

/// On-disk element type codes of the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    I32 = 3,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::I32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a·b + beta * c` on raw strided buffers.
    ///
    /// # Safety
    /// Strides and dimensions must describe memory inside the given pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("float conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float conversion")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Row-major matrix product `c (+)= op(a)·op(b)` where `op` optionally
/// transposes. `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is stored
/// `k×n` (or `n×k` when `trans_b`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
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
    assert_eq!(a.len(), m * k, "matmul lhs size");
    assert_eq!(b.len(), k * n, "matmul rhs size");
    assert_eq!(c.len(), m * n, "matmul out size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: sizes asserted above; strides describe row-major layouts of
    // exactly those sizes.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

/// Dense n-dimensional array with row-major storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return shape_err("Tensor::new", format!("zero-sized dimension in {shape:?}"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// Standard normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z * std)
        })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(lo..hi)))
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// Shape as `[N, C, H, W]`, failing for other ranks.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => shape_err(op, format!("expected a 4-d tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc })
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|v| v.is_zero())
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(
                op,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            );
        }
        Ok(())
    }

    /// Fails with [`Error::NonFinite`] if any element is NaN or infinite.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    /// Concatenates two `[N, C, H, W]` tensors along the channel axis.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        let [n, ca, h, w] = self.dims4("concat_channels")?;
        let [n2, cb, h2, w2] = other.dims4("concat_channels")?;
        if (n, h, w) != (n2, h2, w2) {
            return shape_err(
                "concat_channels",
                format!("{:?} vs {:?} (batch/spatial)", self.shape, other.shape),
            );
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for b in 0..n {
            data.extend_from_slice(&self.data[b * ca * plane..(b + 1) * ca * plane]);
            data.extend_from_slice(&other.data[b * cb * plane..(b + 1) * cb * plane]);
        }
        Ok(Self {
            shape: vec![n, ca + cb, h, w],
            data,
        })
    }

    /// Inverse of [`Tensor::concat_channels`]: splits off the first `first` channels.
    pub fn split_channels(&self, first: usize) -> Result<(Self, Self)> {
        let [n, c, h, w] = self.dims4("split_channels")?;
        if first == 0 || first >= c {
            return shape_err("split_channels", format!("cannot split {c} channels at {first}"));
        }
        let plane = h * w;
        let mut a = Vec::with_capacity(n * first * plane);
        let mut b = Vec::with_capacity(n * (c - first) * plane);
        for s in 0..n {
            let base = s * c * plane;
            a.extend_from_slice(&self.data[base..base + first * plane]);
            b.extend_from_slice(&self.data[base + first * plane..base + c * plane]);
        }
        Ok((
            Self {
                shape: vec![n, first, h, w],
                data: a,
            },
            Self {
                shape: vec![n, c - first, h, w],
                data: b,
            },
        ))
    }

    /// Selects samples along the leading (batch) axis.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Self> {
        let n = self.shape[0];
        let stride = self.data.len() / n;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= n {
                return shape_err("select_batch", format!("index {i} out of range for batch {n}"));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(shape, data)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.expect_same_shape(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(shape, data)
    }
}

/// Integer class map of shape `[N, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    shape: [usize; 3],
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], data: Vec<u32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return shape_err(
                "LabelMap::new",
                format!("shape {shape:?} does not hold {} labels", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn max_label(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Per-pixel argmax over the channel axis of `[N, C, H, W]` logits.
    /// Ties resolve to the lowest class index.
    pub fn argmax<T: Scalar>(logits: &Tensor<T>) -> Result<Self> {
        let [n, c, h, w] = logits.dims4("argmax")?;
        let plane = h * w;
        let d = logits.data();
        let mut out = Vec::with_capacity(n * plane);
        for b in 0..n {
            for p in 0..plane {
                let mut best = 0usize;
                let mut best_v = d[b * c * plane + p];
                for k in 1..c {
                    let v = d[(b * c + k) * plane + p];
                    if v > best_v {
                        best = k;
                        best_v = v;
                    }
                }
                out.push(best as u32);
            }
        }
        Self::new([n, h, w], out)
    }

    pub fn select_batch(&self, indices: &[usize]) -> Result<Self> {
        let [n, h, w] = self.shape;
        let plane = h * w;
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            if i >= n {
                return shape_err("select_batch", format!("index {i} out of range for batch {n}"));
            }
            data.extend_from_slice(&self.data[i * plane..(i + 1) * plane]);
        }
        Self::new([indices.len(), h, w], data)
    }

    /// Single image `i` as a row-major `H×W` slice.
    pub fn image(&self, i: usize) -> &[u32] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[i * plane..(i + 1) * plane]
    }
}
