// Thin safe wrappers over matrixmultiply's strided GEMM.
//
// C <- alpha * A * B + beta * C, with A: m x k, B: k x n, C: m x n, each
// described by (row stride, column stride) in elements.

#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Layout { rs: cols, cs: 1 }
    }

    /// Reads a row-major `rows x cols` buffer as its transpose.
    pub fn transposed(cols: usize) -> Self {
        Layout { rs: 1, cs: cols }
    }

    fn extent(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

pub(crate) trait GemmScalar: Copy + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        la: Layout,
        b: &[Self],
        lb: Layout,
        beta: Self,
        c: &mut [Self],
        lc: Layout,
    );
}

macro_rules! impl_gemm {
    ($t:ty, $f:path) => {
        impl GemmScalar for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                la: Layout,
                b: &[Self],
                lb: Layout,
                beta: Self,
                c: &mut [Self],
                lc: Layout,
            ) {
                assert!(a.len() >= la.extent(m, k), "gemm: A too short");
                assert!(b.len() >= lb.extent(k, n), "gemm: B too short");
                assert!(c.len() >= lc.extent(m, n), "gemm: C too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every strided access made by
                // the routine to the provided slices, and `c` is uniquely borrowed.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        la.rs as isize,
                        la.cs as isize,
                        b.as_ptr(),
                        lb.rs as isize,
                        lb.cs as isize,
                        beta,
                        c.as_mut_ptr(),
                        lc.rs as isize,
                        lc.cs as isize,
                    );
                }
            }
        }
    };
}

impl_gemm!(f64, matrixmultiply::dgemm);
impl_gemm!(f32, matrixmultiply::sgemm);
