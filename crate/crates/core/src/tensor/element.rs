use num_traits::Float;
use std::fmt::Debug;

/// Scalar type a [`Tensor`](super::Tensor) can hold.
///
/// `f32` is used for training; `f64` for gradient checks.
pub trait Element: Float + Default + Debug + Send + Sync + 'static {
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a b` (or `c += a b` when `accumulate`) for an `m x k` by `k x n`
    /// product, with explicit row/column strides on every operand.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
        accumulate: bool,
    );

    /// `x -> exp(x)` over a slice whose entries are all `<= 0`.
    fn exp_nonpositive(xs: &mut [Self]) {
        for x in xs {
            *x = x.exp();
        }
    }
}

/// Polynomial `exp` for `x <= 0`, relative error below 5e-7, written so the
/// loop vectorizes.
fn exp_nonpositive_f32(xs: &mut [f32]) {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    for x in xs {
        let v = x.max(-87.0);
        let n = (v * LOG2E).round();
        let r = v - n * LN2_HI - n * LN2_LO;
        let p = 1.0
            + r * (1.0
                + r * (0.5
                    + r * (0.166_666_67 + r * (0.041_666_668 + r * (0.008_333_334 + r * 0.001_388_889)))));
        let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
        *x = p * scale;
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * rs + (cols - 1) * cs;
        assert!(last < len, "gemm operand of length {len} too short for {rows}x{cols}");
    }
}

macro_rules! impl_element {
    ($t:ty, $name:literal, $kernel:path $(, $exp:path)?) => {
        impl Element for $t {
            $(
                fn exp_nonpositive(xs: &mut [Self]) {
                    $exp(xs)
                }
            )?

            const NAME: &'static str = $name;

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
                accumulate: bool,
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }
        }
    };
}

impl_element!(f32, "f32", matrixmultiply::sgemm, exp_nonpositive_f32);
impl_element!(f64, "f64", matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_matches_libm() {
        let mut xs: Vec<f32> = (0..20000).map(|i| -(i as f32) * 0.0045).collect();
        xs.push(f32::NEG_INFINITY);
        let want: Vec<f32> = xs.iter().map(|x| x.exp()).collect();
        f32::exp_nonpositive(&mut xs);
        for (g, w) in xs.iter().zip(&want) {
            assert!((g - w).abs() <= 5e-7 * w.max(1e-37) + 1e-37, "{g} vs {w}");
        }
    }
}
