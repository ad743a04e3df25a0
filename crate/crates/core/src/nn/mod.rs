//! Minimal convolutional network toolkit with hand-written backward passes.
//!
//! Activations are `N x C x D x H x W`; 2D data uses `D = 1` and kernels of
//! depth 1, so every layer handles both ranks. All parameters of a network live
//! in one flat vector described by a [`ParamTable`]; gradients use the same layout.

pub mod adam;
pub mod layers;
pub mod unet;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use unet::{UNet, UNetSpec};

/// Floating point element type of a network.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Strides and extents must address memory inside the given slices.
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Scalar for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Matrix operand: slice plus (row stride, column stride).
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> Mat<'a, T> {
    /// Row-major `rows x cols` matrix.
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len()
    }
}

/// Safe wrapper: `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c`, where
/// `c` is row-major with row stride `rsc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: Mat<'_, T>,
    b: Mat<'_, T>,
    beta: T,
    c: &mut [T],
    rsc: usize,
) {
    assert!(
        a.fits(m, k) && b.fits(k, n) && (m == 0 || n == 0 || (m - 1) * rsc + n <= c.len()),
        "gemm operand out of bounds"
    );
    // SAFETY: bounds asserted above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Spatial extent `[D, H, W]` plus the rank it stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub rank: usize,
    pub dims: [usize; 3],
}

impl Geometry {
    pub fn from_shape(shape: &[usize]) -> Self {
        match shape {
            [h, w] => Self {
                rank: 2,
                dims: [1, *h, *w],
            },
            [d, h, w] => Self {
                rank: 3,
                dims: [*d, *h, *w],
            },
            _ => panic!("unsupported spatial shape {shape:?}"),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        if self.rank == 2 {
            vec![self.dims[1], self.dims[2]]
        } else {
            self.dims.to_vec()
        }
    }

    pub fn volume(&self) -> usize {
        self.dims.iter().product()
    }

    /// Per-axis pooling factor: 2 along every spatial axis of the rank.
    pub fn pool_factor(&self) -> [usize; 3] {
        if self.rank == 3 {
            [2, 2, 2]
        } else {
            [1, 2, 2]
        }
    }

    pub fn downsampled(&self) -> Self {
        let f = self.pool_factor();
        Self {
            rank: self.rank,
            dims: [self.dims[0] / f[0], self.dims[1] / f[1], self.dims[2] / f[2]],
        }
    }

    pub fn upsampled(&self) -> Self {
        let f = self.pool_factor();
        Self {
            rank: self.rank,
            dims: [self.dims[0] * f[0], self.dims[1] * f[1], self.dims[2] * f[2]],
        }
    }
}

/// Activation tensor `N x C x spatial`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub geom: Geometry,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, c: usize, geom: Geometry) -> Self {
        Self {
            n,
            c,
            geom,
            data: vec![T::zero(); n * c * geom.volume()],
        }
    }

    pub fn from_vec(n: usize, c: usize, geom: Geometry, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * geom.volume(), "tensor data length");
        Self { n, c, geom, data }
    }

    pub fn plane(&self) -> usize {
        self.geom.volume()
    }

    /// All channels of sample `i`.
    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.c * self.plane();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.c * self.plane();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

/// Parameter initialisation rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Layout of the flat parameter vector.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamTable {
    pub entries: Vec<ParamEntry>,
}

impl ParamTable {
    pub fn total(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len)
    }
}

/// Location of one parameter array inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn of<'a, T>(&self, flat: &'a [T]) -> &'a [T] {
        &flat[self.offset..self.offset + self.len]
    }

    pub fn of_mut<'a, T>(&self, flat: &'a mut [T]) -> &'a mut [T] {
        &mut flat[self.offset..self.offset + self.len]
    }
}

/// Collects parameter declarations in a fixed order, then materialises them.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    table: ParamTable,
    inits: Vec<Init>,
}

impl ParamBuilder {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Slot {
        let len = shape.iter().product();
        let offset = self.table.total();
        self.table.entries.push(ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
            len,
        });
        self.inits.push(init);
        Slot { offset, len }
    }

    pub fn table(&self) -> &ParamTable {
        &self.table
    }

    /// Draws initial values in declaration order.
    pub fn materialize<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let mut values = Vec::with_capacity(self.table.total());
        for (entry, init) in self.table.entries.iter().zip(&self.inits) {
            match *init {
                Init::Zeros => values.extend(std::iter::repeat_n(T::zero(), entry.len)),
                Init::Ones => values.extend(std::iter::repeat_n(T::one(), entry.len)),
                Init::Uniform(bound) => values.extend(
                    (0..entry.len).map(|_| T::lit(rng.random_range(-bound..=bound))),
                ),
            }
        }
        values
    }
}
