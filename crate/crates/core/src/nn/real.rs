//! Floating-point element type of the network.
//!
//! Training runs in `f32`. The same code is instantiated at `f64` for
//! gradient checking.

use std::fmt::Debug;

use num_traits::Float;

pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    const NAME: &'static str;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c <- alpha * a * b + beta * c` over strided row/column views.
    ///
    /// # Safety
    /// Every view must stay inside its backing allocation for the given
    /// dimensions and strides; [`gemm`] checks this before calling.
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
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided read-only view: element `(i, j)` lives at `off + i*rs + j*cs`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, F> {
    pub data: &'a [F],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

pub(crate) struct ViewMut<'a, F> {
    pub data: &'a mut [F],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F> View<'a, F> {
    /// Row-major `rows x cols` block starting at `off` with row stride `ld`.
    pub fn rows(data: &'a [F], off: usize, ld: usize) -> Self {
        View { data, off, rs: ld, cs: 1 }
    }

    /// Transposed view of a row-major block with row stride `ld`.
    pub fn t(data: &'a [F], off: usize, ld: usize) -> Self {
        View { data, off, rs: 1, cs: ld }
    }
}

impl<'a, F> ViewMut<'a, F> {
    pub fn rows(data: &'a mut [F], off: usize, ld: usize) -> Self {
        ViewMut { data, off, rs: ld, cs: 1 }
    }
}

fn extent(off: usize, r: usize, c: usize, rs: usize, cs: usize) -> usize {
    if r == 0 || c == 0 {
        return 0;
    }
    off + (r - 1) * rs + (c - 1) * cs + 1
}

/// `c <- alpha * a(m x k) * b(k x n) + beta * c(m x n)`.
pub(crate) fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: View<'_, F>,
    b: View<'_, F>,
    beta: F,
    c: ViewMut<'_, F>,
) {
    assert!(extent(a.off, m, k, a.rs, a.cs) <= a.data.len(), "gemm: a out of bounds");
    assert!(extent(b.off, k, n, b.rs, b.cs) <= b.data.len(), "gemm: b out of bounds");
    assert!(extent(c.off, m, n, c.rs, c.cs) <= c.data.len(), "gemm: c out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked above.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        // a: 2x3, b stored as 2x3 and used transposed -> 2x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, -1.0, 2.0, 1.0, 0.5];
        let mut c = [0.0f64; 4];
        gemm(
            2,
            3,
            2,
            1.0,
            View::rows(&a, 0, 3),
            View::t(&b, 0, 3),
            0.0,
            ViewMut::rows(&mut c, 0, 2),
        );
        assert_eq!(c, [-2.0, 5.5, -2.0, 16.0]);
    }
}
