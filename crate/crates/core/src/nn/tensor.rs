use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of the kernel. Implemented for `f32` (training) and `f64`
/// (finite-difference oracle).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    /// `c = op(a) * op(b) (+ c if accumulate)`, all row-major.
    ///
    /// `op(a)` is `m x k`, `op(b)` is `k x n`. A transposed operand is stored
    /// in its untransposed layout (`k x m` for `a`, `n x k` for `b`).
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
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
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: operand extents were checked against m, k, n above and
                // the strides address exactly those extents.
                unsafe {
                    $kernel(
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
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {dims:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} hold {numel} elements, data has {}", data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn filled(dims: &[usize], value: T) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {dims:?}", self.dims),
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Leading dimension, treated as the batch axis.
    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    /// Elements per leading-axis entry.
    pub fn sample_len(&self) -> usize {
        self.data.len() / self.dims[0]
    }

    pub fn sample(&self, index: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[index * len..(index + 1) * len]
    }

    /// Copies the listed leading-axis entries into a new tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor<T> {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut dims = self.dims.clone();
        dims[0] = indices.len();
        Tensor { dims, data }
    }

    /// First `count` leading-axis entries.
    pub fn head(&self, count: usize) -> Tensor<T> {
        let count = count.min(self.dims[0]);
        let mut dims = self.dims.clone();
        dims[0] = count;
        Tensor {
            dims,
            data: self.data[..count * self.sample_len()].to_vec(),
        }
    }

    /// Stacks tensors with identical dims along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for t in items {
            if t.dims != first.dims {
                return Err(Error::shape(
                    "stack",
                    format!("dims {:?} differ from {:?}", t.dims, first.dims),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(&first.dims);
        Ok(Tensor { dims, data })
    }

    /// Concatenates tensors along the leading axis; trailing dims must match.
    pub fn stack_batches(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("concat", "no tensors to concatenate"))?;
        let mut data = Vec::with_capacity(items.iter().map(Tensor::numel).sum());
        let mut batch = 0;
        for t in items {
            if t.dims.len() != first.dims.len() || t.dims[1..] != first.dims[1..] {
                return Err(Error::shape(
                    "concat",
                    format!("dims {:?} differ from {:?}", t.dims, first.dims),
                ));
            }
            batch += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        let mut dims = first.dims.clone();
        dims[0] = batch;
        Ok(Tensor { dims, data })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .chunks(LANES)
            .all(|c| c.iter().fold(true, |ok, v| ok & v.is_finite()))
    }
}

const LANES: usize = 8;

/// `sum f(a_i, b_i)` in f64 with a fixed 8-lane accumulation order.
#[inline]
pub(crate) fn lane_sum<T: Scalar>(a: &[T], b: &[T], f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut acc = [0.0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..LANES {
            acc[i] += f(x[i].to_f64().unwrap_or(f64::NAN), y[i].to_f64().unwrap_or(f64::NAN));
        }
    }
    let mut total = acc.iter().sum::<f64>();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        total += f(x.to_f64().unwrap_or(f64::NAN), y.to_f64().unwrap_or(f64::NAN));
    }
    total
}
