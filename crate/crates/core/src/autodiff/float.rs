use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float as NumFloat, FromPrimitive};

/// Scalar element type of tensors: implemented for `f32` and `f64`.
pub trait Float:
    NumFloat
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BITS: u32;

    /// `c = alpha * a * b + beta * c` for strided row/column matrices.
    ///
    /// # Safety
    /// Pointers and strides must address valid `m x k`, `k x n` and `m x n`
    /// regions; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to any float")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    /// Additive pre-softmax bias for a dropped key.
    fn mask_bias() -> Self {
        Self::from_f64_lossy(-1e9)
    }

    fn write_le(self, w: &mut impl std::io::Write) -> std::io::Result<()>;
}

/// Products at or below this many multiply-adds skip the packing kernel.
const SMALL_GEMM: usize = 4096;

/// Plain strided triple loop with the same contract as [`Float::gemm`].
#[allow(clippy::too_many_arguments)]
unsafe fn small_gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: *const T,
    rsa: isize,
    csa: isize,
    b: *const T,
    rsb: isize,
    csb: isize,
    beta: T,
    c: *mut T,
    rsc: isize,
    csc: isize,
) {
    for i in 0..m as isize {
        for j in 0..n as isize {
            let mut acc = T::zero();
            for p in 0..k as isize {
                acc += *a.offset(i * rsa + p * csa) * *b.offset(p * rsb + j * csb);
            }
            let dst = c.offset(i * rsc + j * csc);
            *dst = if beta == T::zero() { alpha * acc } else { alpha * acc + beta * *dst };
        }
    }
}

impl Float for f32 {
    const DTYPE: &'static str = "f32";
    const BITS: u32 = 32;

    unsafe fn gemm(
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
        if m * k * n <= SMALL_GEMM {
            small_gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
        } else {
            matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
        }
    }

    fn write_le(self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        w.write_all(&self.to_le_bytes())
    }
}

impl Float for f64 {
    const DTYPE: &'static str = "f64";
    const BITS: u32 = 64;

    unsafe fn gemm(
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
        if m * k * n <= SMALL_GEMM {
            small_gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
        } else {
            matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
        }
    }

    fn write_le(self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        w.write_all(&self.to_le_bytes())
    }
}
