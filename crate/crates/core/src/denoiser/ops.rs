//! Dense kernels shared by the forward and backward passes. All matrices
//! are row-major slices.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of the denoiser. Training runs in `f32`;
/// gradient checks run the same code in `f64`.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static {
    /// `C = alpha * A B + beta * C` with explicit strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n`, `m x n`
    /// matrices, and `c` must not alias `a` or `b`.
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

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `C (m x n) = op(A) op(B) + beta C`, where `op(A)` is `m x k` and `op(B)`
/// is `k x n`. A transposed operand is stored in its untransposed shape.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    c: &mut [F],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "lhs size");
    assert_eq!(b.len(), k * n, "rhs size");
    assert_eq!(c.len(), m * n, "output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: lengths checked above; `c` is a distinct &mut borrow.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
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
        )
    }
}

/// A strided `rows x cols` matrix inside a larger slice.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn dense(off: usize, rows: usize, cols: usize) -> Self {
        View {
            off,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self, len: usize) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < len, "view exceeds its buffer");
        }
    }
}

/// `C = alpha A B (+ C)` on strided views.
#[allow(clippy::too_many_arguments)]
pub fn gemm_view<F: Scalar>(alpha: F, a: &[F], va: View, b: &[F], vb: View, c: &mut [F], vc: View, accumulate: bool) {
    assert!(
        va.cols == vb.rows && vc.rows == va.rows && vc.cols == vb.cols,
        "view shapes"
    );
    va.check(a.len());
    vb.check(b.len());
    vc.check(c.len());
    if vc.rows == 0 || vc.cols == 0 {
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: every view was bounds-checked against its slice; `c` is a
    // distinct &mut borrow.
    unsafe {
        F::gemm_raw(
            va.rows,
            va.cols,
            vb.cols,
            alpha,
            a.as_ptr().add(va.off),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.off),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.off),
            vc.rs as isize,
            vc.cs as isize,
        )
    }
}

/// `y = x W + b` for `rows` rows of width `d_in`.
pub fn linear<F: Scalar>(x: &[F], w: &[F], b: &[F], rows: usize, d_in: usize, d_out: usize) -> Vec<F> {
    let mut y = Vec::with_capacity(rows * d_out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(rows, d_in, d_out, x, false, w, false, &mut y, true);
    y
}

/// Backward of [`linear`]: accumulates into `dw`, `db` and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    dy: &[F],
    rows: usize,
    d_in: usize,
    d_out: usize,
    dw: &mut [F],
    db: &mut [F],
) -> Vec<F> {
    gemm(d_in, rows, d_out, x, true, dy, false, dw, true);
    for row in dy.chunks_exact(d_out) {
        for (g, &v) in db.iter_mut().zip(row) {
            *g = *g + v;
        }
    }
    let mut dx = vec![F::zero(); rows * d_in];
    gemm(rows, d_out, d_in, dy, false, w, true, &mut dx, false);
    dx
}

pub const LN_EPS: f64 = 1e-5;

pub struct LayerNormOut<F> {
    pub y: Vec<F>,
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub fn layer_norm<F: Scalar>(x: &[F], gamma: &[F], beta: &[F], d: usize) -> LayerNormOut<F> {
    let rows = x.len() / d;
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let inv_d = F::one() / F::of(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + F::of(LN_EPS)).sqrt();
        rstd.push(rs);
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    LayerNormOut { y, xhat, rstd }
}

pub fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    ln: &LayerNormOut<F>,
    gamma: &[F],
    d: usize,
    dgamma: &mut [F],
    dbeta: &mut [F],
) -> Vec<F> {
    let rows = dy.len() / d;
    let mut dx = vec![F::zero(); dy.len()];
    let inv_d = F::one() / F::of(d as f64);
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &ln.xhat[r * d..(r + 1) * d];
        let mut mean_g = F::zero();
        let mut mean_gx = F::zero();
        for j in 0..d {
            let g = dyr[j] * gamma[j];
            mean_g = mean_g + g;
            mean_gx = mean_gx + g * xh[j];
            dgamma[j] = dgamma[j] + dyr[j] * xh[j];
            dbeta[j] = dbeta[j] + dyr[j];
        }
        mean_g = mean_g * inv_d;
        mean_gx = mean_gx * inv_d;
        let rs = ln.rstd[r];
        for j in 0..d {
            let g = dyr[j] * gamma[j];
            dx[r * d + j] = rs * (g - mean_g - xh[j] * mean_gx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + tanh(c * (x + a * x * x * x)))
}

/// `tanh` through one `exp`; several times faster than the libm call and
/// exact at the saturated ends.
fn tanh<F: Scalar>(u: F) -> F {
    let two = F::of(2.0);
    F::one() - two / ((two * u).exp() + F::one())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let u = c * (x + a * x * x * x);
    let th = tanh(u);
    let du = c * (F::one() + F::of(3.0) * a * x * x);
    half * (F::one() + th) + half * x * (F::one() - th * th) * du
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return;
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Sinusoidal embedding of a scalar position, `d` entries.
pub fn sinusoid<F: Scalar>(pos: f64, d: usize) -> Vec<F> {
    let half = d / 2;
    let mut out = vec![F::zero(); d];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        out[k] = F::of((pos * freq).sin());
        out[half + k] = F::of((pos * freq).cos());
    }
    out
}
