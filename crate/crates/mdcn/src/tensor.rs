//! Dense 5-D tensors, small matrices, and the shape arithmetic used by every
//! layer. The element type is generic so the same kernels run in f32 for
//! production and f64 for gradient checking.

use crate::error::{Error, Result};

/// Scalar element type usable by the numeric kernels.
///
/// The `gemm` hook routes matrix products to `matrixmultiply`'s single
/// threaded sgemm/dgemm, which accumulate in a fixed order for fixed
/// dimensions, so results are bit-identical across runs and thread counts.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// C := alpha * A(m,k) * B(k,n) + beta * C(m,n), arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn of_f64(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("real converts to f64")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    assert!(rs > 0 && cs > 0, "gemm strides must be positive");
    if rows == 0 || cols == 0 {
        return;
    }
    let max = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(max < len, "gemm operand out of bounds: {max} >= {len}");
}

macro_rules! impl_real {
    ($ty:ty, $gemm:path) => {
        impl Real for $ty {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                // Bounds verified above; matrixmultiply only exposes a raw
                // pointer interface.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Shape of a 5-D tensor: (batch, channels, frames, rows, columns).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape5 {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Shape5 { n, c, d, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.d * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat offset of (n, c, d, h, w) in row-major order, w fastest.
    #[inline]
    pub fn index(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
        (((n * self.c + c) * self.d + d) * self.h + h) * self.w + w
    }

    /// Elements in one batch entry.
    pub fn per_batch(&self) -> usize {
        self.c * self.d * self.h * self.w
    }

    /// Elements in one (d, h, w) volume.
    pub fn volume(&self) -> usize {
        self.d * self.h * self.w
    }

    fn all_positive(&self) -> bool {
        self.n >= 1 && self.c >= 1 && self.d >= 1 && self.h >= 1 && self.w >= 1
    }
}

impl std::fmt::Display for Shape5 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}x{}",
            self.n, self.c, self.d, self.h, self.w
        )
    }
}

/// Dense 5-D array in row-major order. This is the universal carrier for
/// activations and convolution weights (weights use the layout
/// out_channels x in_channels x kt x kh x kw).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5<T> {
    pub shape: Shape5,
    data: Vec<T>,
}

/// Production-precision video tensor.
pub type VideoTensor = Tensor5<f32>;

impl<T: Real> Tensor5<T> {
    pub fn new(shape: Shape5, data: Vec<T>) -> Result<Self> {
        if !shape.all_positive() {
            return Err(Error::config(format!(
                "tensor shape {shape} has a zero-sized dimension"
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::config(format!(
                "tensor data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Tensor5 { shape, data })
    }

    pub fn zeros(shape: Shape5) -> Self {
        Tensor5 {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn from_fn(shape: Shape5, mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..shape.len()).map(|i| f(i)).collect();
        Tensor5 { shape, data }
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, d, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, d: usize, h: usize, w: usize, v: T) {
        let i = self.shape.index(n, c, d, h, w);
        self.data[i] = v;
    }

    /// Converts elementwise, preserving shape. Used to move between the
    /// production f32 path and the f64 gradient-check mode.
    pub fn cast<U: Real>(&self) -> Tensor5<U> {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }
}

/// Row-major 2-D matrix, used for pooled features, fc weights and logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }
}

/// Output extent of a conv/pool axis: floor((in + 2*pad - kernel)/stride) + 1.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::config("kernel and stride must be >= 1"));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::config(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Convolution geometry. Convolutions in this model never carry bias terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        padding: (usize, usize, usize),
    ) -> Result<Self> {
        let spec = ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("channel counts must be >= 1"));
        }
        let (kt, kh, kw) = self.kernel;
        let (st, sh, sw) = self.stride;
        if kt == 0 || kh == 0 || kw == 0 || st == 0 || sh == 0 || sw == 0 {
            return Err(Error::config("kernel and stride components must be >= 1"));
        }
        Ok(())
    }

    /// Expected weight tensor shape (out, in, kt, kh, kw).
    pub fn weight_shape(&self) -> Shape5 {
        Shape5::new(
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
            self.kernel.2,
        )
    }

    /// Elements of one receptive field: in_channels * kernel volume.
    pub fn field_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1 * self.kernel.2
    }

    pub fn out_shape(&self, input: Shape5) -> Result<Shape5> {
        if input.c != self.in_channels {
            return Err(Error::config(format!(
                "input has {} channels, spec expects {}",
                input.c, self.in_channels
            )));
        }
        let d = conv_out_extent(input.d, self.kernel.0, self.stride.0, self.padding.0)?;
        let h = conv_out_extent(input.h, self.kernel.1, self.stride.1, self.padding.1)?;
        let w = conv_out_extent(input.w, self.kernel.2, self.stride.2, self.padding.2)?;
        Ok(Shape5::new(input.n, self.out_channels, d, h, w))
    }
}

/// Max-pool geometry. Padded cells are treated as -inf and never selected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
}

impl PoolSpec {
    pub fn new(
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        padding: (usize, usize, usize),
    ) -> Result<Self> {
        let (kt, kh, kw) = kernel;
        let (st, sh, sw) = stride;
        if kt == 0 || kh == 0 || kw == 0 || st == 0 || sh == 0 || sw == 0 {
            return Err(Error::config("kernel and stride components must be >= 1"));
        }
        Ok(PoolSpec {
            kernel,
            stride,
            padding,
        })
    }

    pub fn out_shape(&self, input: Shape5) -> Result<Shape5> {
        let d = conv_out_extent(input.d, self.kernel.0, self.stride.0, self.padding.0)?;
        let h = conv_out_extent(input.h, self.kernel.1, self.stride.1, self.padding.1)?;
        let w = conv_out_extent(input.w, self.kernel.2, self.stride.2, self.padding.2)?;
        Ok(Shape5::new(input.n, input.c, d, h, w))
    }
}

/// Sum with a fixed two-level accumulation order: block partials first, then
/// the partials in sequence. Better conditioned than a running sum on long
/// f32 reductions and still deterministic.
pub fn blocked_sum<T: Real>(values: &[T]) -> T {
    const BLOCK: usize = 4096;
    if values.len() <= BLOCK {
        let mut acc = T::zero();
        for &v in values {
            acc += v;
        }
        return acc;
    }
    let mut total = T::zero();
    for chunk in values.chunks(BLOCK) {
        let mut acc = T::zero();
        for &v in chunk {
            acc += v;
        }
        total += acc;
    }
    total
}
