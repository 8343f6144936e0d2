//! Dense row-major buffers and a strided GEMM.
//!
//! The predictor is generic over [`Scalar`] so the same forward/backward code
//! runs in `f32` for training and in `f64` for finite-difference checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    /// `c = alpha * a @ b + beta * c` over raw strided storage.
    ///
    /// # Safety
    /// All strided accesses implied by the dimensions must be in bounds.
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

    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
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

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

/// Mutable strided matrix view.
pub struct MatMut<'a, T> {
    data: &'a mut [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

fn last_index(offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        offset
    } else {
        offset + (rows - 1) * rs + (cols - 1) * cs
    }
}

impl<'a, T> MatRef<'a, T> {
    /// A contiguous row-major `rows x cols` matrix.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "buffer too small for {rows}x{cols}");
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    /// A `rows x cols` block starting at `offset` with row stride `rs`.
    pub fn strided(data: &'a [T], offset: usize, rows: usize, cols: usize, rs: usize) -> Self {
        let m = Self { data, offset, rows, cols, rs, cs: 1 };
        assert!(rows == 0 || cols == 0 || last_index(offset, rows, cols, rs, 1) < data.len());
        m
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "buffer too small for {rows}x{cols}");
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn strided(data: &'a mut [T], offset: usize, rows: usize, cols: usize, rs: usize) -> Self {
        assert!(rows == 0 || cols == 0 || last_index(offset, rows, cols, rs, 1) < data.len());
        Self { data, offset, rows, cols, rs, cs: 1 }
    }
}

/// `c = alpha * a @ b + beta * c`.
pub fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(a.rows, c.rows, "output rows differ");
    assert_eq!(b.cols, c.cols, "output cols differ");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // Nothing to accumulate; only the beta scaling applies.
        for i in 0..c.rows {
            for j in 0..c.cols {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] = if beta == T::zero() { T::zero() } else { beta * c.data[idx] };
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked against its slice at construction,
    // and the dimension asserts above tie the three views together.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Row-wise numerically stable softmax in place.
pub fn softmax_rows<T: Scalar>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = T::one() / sum;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

/// `log(sum(exp(row)))` computed stably.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}
