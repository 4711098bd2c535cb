use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type the engine is generic over. `f32` is the working precision
/// for training; `f64` exists so gradient checks can run at a precision where
/// central finite differences are trustworthy.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Default + Send + Sync + 'static
{
    /// Dense matrix multiply `C = alpha * A @ B + beta * C` with explicit
    /// row/column strides, dispatching to the precision-matched BLAS-style
    /// kernel.
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
}

/// Largest flat index touched by an `m x n` matrix walked with the given
/// strides, plus one. Zero when the matrix is empty.
fn stride_extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    let corner = |r: usize, c: usize| r as isize * rs + c as isize * cs;
    let mut max = 0isize;
    let mut min = 0isize;
    for (r, c) in [(0, 0), (rows - 1, 0), (0, cols - 1), (rows - 1, cols - 1)] {
        max = max.max(corner(r, c));
        min = min.min(corner(r, c));
    }
    assert!(min >= 0, "negative strides are not supported");
    (max + 1) as usize
}

macro_rules! impl_element {
    ($ty:ty, $gemm:path) => {
        impl Element for $ty {
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
            ) {
                debug_assert!(a.len() >= stride_extent(m, k, rsa, csa));
                debug_assert!(b.len() >= stride_extent(k, n, rsb, csb));
                debug_assert!(c.len() >= stride_extent(m, n, rsc, csc));
                if m == 0 || n == 0 {
                    return;
                }
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

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

/// Convert an `f64` constant to the working precision. Panics only if the
/// target type cannot represent any finite value, which neither float type
/// hits for the constants used here.
pub fn num<E: Element>(x: f64) -> E {
    E::from_f64(x).expect("constant not representable")
}

/// Dense row-major tensor. The shape may have any rank; most ops expect
/// `[batch, channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
    /// Whether gradients should be accumulated for this tensor when it is
    /// registered as a tape leaf.
    pub requires_grad: bool,
}

impl<E: Element> Tensor<E> {
    /// Build a tensor from a shape and matching flat row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor_new",
                detail: format!(
                    "shape {:?} implies {} elements but data has {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![E::zero(); numel], requires_grad: false }
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false }
    }

    pub fn scalar(value: E) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
            requires_grad: false,
        }
    }

    /// Marks the tensor as requiring gradients; builder-style.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Size of axis `i`; panics on out-of-range axes (programmer error).
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// The single value of a scalar (rank-0 or one-element) tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy conversion between working precisions (used by the gradient
    /// checker to lift f32 cases to f64).
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| F::from_f64(v.to_f64().expect("finite")).expect("representable"))
                .collect(),
            requires_grad: self.requires_grad,
        }
    }

    /// Reinterpret the data with a new shape of identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!(
                    "cannot view {:?} ({} elements) as {:?} ({})",
                    self.shape,
                    self.data.len(),
                    shape,
                    numel
                ),
            });
        }
        self.shape = shape;
        Ok(self)
    }
}
