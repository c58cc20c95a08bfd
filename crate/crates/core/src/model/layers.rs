//! Layer kernels on NHWC buffers. Every function is a plain slice transform;
//! the network wires them together and owns the caches.

use crate::tensor::{gemm, gemm_new, Scalar, Trans};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// 3×3, stride 1, zero-padding 1 patch matrix: `[n·h·w, 9·c]`, columns in
/// `(ky, kx, c)` order.
pub fn im2col<F: Scalar>(x: &[F], n: usize, h: usize, w: usize, c: usize) -> Vec<F> {
    let mut cols = Vec::with_capacity(n * h * w * 9 * c);
    let zero = F::zero();
    let pad = |cols: &mut Vec<F>, len: usize| cols.resize(cols.len() + len, zero);
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let kx0 = usize::from(xx == 0);
                let kx1 = if xx + 1 == w { 2 } else { 3 };
                for ky in 0..3 {
                    let sy = y + ky;
                    if sy == 0 || sy > h || kx1 <= kx0 {
                        pad(&mut cols, 3 * c);
                        continue;
                    }
                    let src = ((b * h + sy - 1) * w + xx + kx0 - 1) * c;
                    pad(&mut cols, kx0 * c);
                    cols.extend_from_slice(&x[src..src + (kx1 - kx0) * c]);
                    pad(&mut cols, (3 - kx1) * c);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im<F: Scalar>(dcols: &[F], n: usize, h: usize, w: usize, c: usize) -> Vec<F> {
    let mut dx = F::zeros(n * h * w * c);
    for_each_tap(n, h, w, c, |dst, src, len| {
        for (d, &s) in dx[dst..dst + len].iter_mut().zip(&dcols[src..src + len]) {
            *d = *d + s;
        }
    });
    dx
}

/// Visits the in-bounds taps of every output pixel as `(input offset,
/// patch offset, len)`. Horizontally adjacent taps share one contiguous span
/// in both buffers, so each kernel row is a single run.
fn for_each_tap(n: usize, h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize)) {
    let k = 9 * c;
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * k;
                let kx0 = usize::from(xx == 0);
                let kx1 = if xx + 1 == w { 2 } else { 3 };
                if kx1 <= kx0 {
                    continue;
                }
                for ky in 0..3 {
                    let sy = y + ky;
                    if sy == 0 || sy > h {
                        continue;
                    }
                    let src = ((b * h + sy - 1) * w + xx + kx0 - 1) * c;
                    let dst = row + (ky * 3 + kx0) * c;
                    f(src, dst, (kx1 - kx0) * c);
                }
            }
        }
    }
}

/// `cols [m, 9·cin] · weight [9·cin, cout]`.
pub fn conv_forward<F: Scalar>(cols: &[F], weight: &[F], m: usize, k: usize, cout: usize) -> Vec<F> {
    gemm_new(m, k, cout, cols, Trans::No, weight, Trans::No)
}

/// Returns `(dweight, dcols)`; `dcols` is skipped when not needed.
pub fn conv_backward<F: Scalar>(
    cols: &[F],
    weight: &[F],
    dout: &[F],
    m: usize,
    k: usize,
    cout: usize,
    need_input_grad: bool,
) -> (Vec<F>, Option<Vec<F>>) {
    let dw = gemm_new(k, m, cout, cols, Trans::Yes, dout, Trans::No);
    let dcols = need_input_grad.then(|| gemm_new(m, cout, k, dout, Trans::No, weight, Trans::Yes));
    (dw, dcols)
}

/// Per-channel mean and biased variance of an `[m, c]` buffer, accumulated
/// in `f64` in row order.
pub fn channel_stats<F: Scalar>(x: &[F], m: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    // One pass in f64; post-conv activations are near zero-mean, so the
    // sum-of-squares form loses nothing that matters at f32 precision.
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for row in x.chunks_exact(c) {
        for ((s, q), &v) in sum.iter_mut().zip(sq.iter_mut()).zip(row) {
            let v = v.as_f64();
            *s += v;
            *q += v * v;
        }
    }
    let inv = 1.0 / m as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s * inv).collect();
    let var = sq
        .iter()
        .zip(&mean)
        .map(|(q, mu)| (q * inv - mu * mu).max(0.0))
        .collect();
    (mean, var)
}

pub struct BnTrainOut<F> {
    pub y: Vec<F>,
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch-statistics normalisation (biased variance).
pub fn bn_train_forward<F: Scalar>(
    x: &[F],
    m: usize,
    c: usize,
    scale: &[F],
    shift: &[F],
) -> BnTrainOut<F> {
    let (mean, var) = channel_stats(x, m, c);
    let inv_std: Vec<F> = var
        .iter()
        .map(|&v| F::of_f64(1.0 / (v + BN_EPS).sqrt()))
        .collect();
    let mean_f: Vec<F> = mean.iter().map(|&v| F::of_f64(v)).collect();
    let mut xhat = Vec::with_capacity(m * c);
    let mut y = Vec::with_capacity(m * c);
    for xr in x.chunks_exact(c) {
        xhat.extend(xr.iter().zip(&mean_f).zip(&inv_std).map(|((&v, &mu), &is)| (v - mu) * is));
        let hr = &xhat[xhat.len() - c..];
        y.extend(hr.iter().zip(scale).zip(shift).map(|((&h, &g), &b)| g * h + b));
    }
    BnTrainOut {
        y,
        xhat,
        inv_std,
        mean,
        var,
    }
}

/// Running-statistics normalisation, in place.
pub fn bn_eval_inplace<F: Scalar>(
    x: &mut [F],
    c: usize,
    scale: &[F],
    shift: &[F],
    running_mean: &[F],
    running_var: &[F],
) {
    let eps = F::of_f64(BN_EPS);
    let mul: Vec<F> = (0..c)
        .map(|j| scale[j] / (running_var[j] + eps).sqrt())
        .collect();
    let add: Vec<F> = (0..c).map(|j| shift[j] - running_mean[j] * mul[j]).collect();
    for row in x.chunks_exact_mut(c) {
        for ((v, &a), &b) in row.iter_mut().zip(&mul).zip(&add) {
            *v = *v * a + b;
        }
    }
}

/// Train-mode batch norm backward. Overwrites `dy` with `dx` and returns
/// `(dscale, dshift)`.
pub fn bn_backward_inplace<F: Scalar>(
    dy: &mut [F],
    xhat: &[F],
    inv_std: &[F],
    scale: &[F],
    m: usize,
    c: usize,
) -> (Vec<F>, Vec<F>) {
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for (dr, hr) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for (((s, t), &d), &h) in sum_dy.iter_mut().zip(sum_dy_xhat.iter_mut()).zip(dr).zip(hr) {
            let d = d.as_f64();
            *s += d;
            *t += d * h.as_f64();
        }
    }
    let dscale: Vec<F> = sum_dy_xhat.iter().map(|&v| F::of_f64(v)).collect();
    let dshift: Vec<F> = sum_dy.iter().map(|&v| F::of_f64(v)).collect();
    // dxhat = dy·γ, so Σdxhat = γ·Σdy and Σdxhat·xhat = γ·Σdy·xhat.
    let inv_m = 1.0 / m as f64;
    let k1: Vec<F> = (0..c)
        .map(|j| F::of_f64(scale[j].as_f64() * inv_std[j].as_f64()))
        .collect();
    let mean_dy: Vec<F> = sum_dy.iter().map(|&v| F::of_f64(v * inv_m)).collect();
    let mean_dyx: Vec<F> = sum_dy_xhat.iter().map(|&v| F::of_f64(v * inv_m)).collect();
    for (dr, hr) in dy.chunks_exact_mut(c).zip(xhat.chunks_exact(c)) {
        for ((((d, &h), &k), &md), &mx) in dr.iter_mut().zip(hr).zip(&k1).zip(&mean_dy).zip(&mean_dyx) {
            *d = k * (*d - md - h * mx);
        }
    }
    (dscale, dshift)
}

/// Returns `(dx, dscale, dshift)` for train-mode batch norm.
pub fn bn_backward<F: Scalar>(
    dy: &[F],
    xhat: &[F],
    inv_std: &[F],
    scale: &[F],
    m: usize,
    c: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut dx = dy.to_vec();
    let (ds, db) = bn_backward_inplace(&mut dx, xhat, inv_std, scale, m, c);
    (dx, ds, db)
}

pub fn relu_inplace<F: Scalar>(x: &mut [F]) {
    for v in x {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Masks `dy` by the sign of the ReLU output `y`.
pub fn relu_backward<F: Scalar>(dy: &mut [F], y: &[F]) {
    for (d, &v) in dy.iter_mut().zip(y) {
        if v <= F::zero() {
            *d = F::zero();
        }
    }
}

/// 2×2 average pool, stride 2. `h` and `w` must be even.
pub fn avg_pool2<F: Scalar>(x: &[F], n: usize, h: usize, w: usize, c: usize) -> Vec<F> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::of_f64(0.25);
    let mut out = F::zeros(n * oh * ow * c);
    for b in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                let o = ((b * oh + y) * ow + xx) * c;
                let i00 = ((b * h + 2 * y) * w + 2 * xx) * c;
                let i01 = i00 + c;
                let i10 = i00 + w * c;
                let i11 = i10 + c;
                for j in 0..c {
                    out[o + j] = (x[i00 + j] + x[i01 + j] + x[i10 + j] + x[i11 + j]) * quarter;
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward<F: Scalar>(dy: &[F], n: usize, h: usize, w: usize, c: usize) -> Vec<F> {
    let quarter = F::of_f64(0.25);
    let mut dx = Vec::with_capacity(n * h * w * c);
    for orow in dy.chunks_exact((w / 2) * c).take(n * (h / 2)) {
        let start = dx.len();
        for px in orow.chunks_exact(c) {
            for _ in 0..2 {
                dx.extend(px.iter().map(|&g| g * quarter));
            }
        }
        dx.extend_from_within(start..);
    }
    dx
}

/// Global average pool `[n, h, w, c] -> [n, c]`.
pub fn global_avg_pool<F: Scalar>(x: &[F], n: usize, hw: usize, c: usize) -> Vec<F> {
    let mut out = F::zeros(n * c);
    let inv = 1.0 / hw as f64;
    for b in 0..n {
        let mut acc = vec![0.0f64; c];
        for row in x[b * hw * c..(b + 1) * hw * c].chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v.as_f64();
            }
        }
        for (o, a) in out[b * c..(b + 1) * c].iter_mut().zip(acc) {
            *o = F::of_f64(a * inv);
        }
    }
    out
}

pub fn global_avg_pool_backward<F: Scalar>(dy: &[F], n: usize, hw: usize, c: usize) -> Vec<F> {
    let inv = F::of_f64(1.0 / hw as f64);
    let mut dx = F::zeros(n * hw * c);
    for b in 0..n {
        let g = &dy[b * c..(b + 1) * c];
        for row in dx[b * hw * c..(b + 1) * hw * c].chunks_exact_mut(c) {
            for (d, &v) in row.iter_mut().zip(g) {
                *d = v * inv;
            }
        }
    }
    dx
}

/// `logits [n, k] = x [n, d] · weightᵀ + bias`, weight stored `[k, d]`.
pub fn linear_forward<F: Scalar>(x: &[F], weight: &[F], bias: &[F], n: usize, d: usize, k: usize) -> Vec<F> {
    let mut out = F::zeros(n * k);
    for row in out.chunks_exact_mut(k) {
        row.copy_from_slice(bias);
    }
    gemm(n, d, k, x, Trans::No, weight, Trans::Yes, &mut out, true);
    out
}

/// Returns `(dx, dweight, dbias)`.
pub fn linear_backward<F: Scalar>(
    x: &[F],
    weight: &[F],
    dy: &[F],
    n: usize,
    d: usize,
    k: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut dw = F::zeros(k * d);
    gemm(k, n, d, dy, Trans::Yes, x, Trans::No, &mut dw, false);
    let mut db = vec![0.0f64; k];
    for row in dy.chunks_exact(k) {
        for (a, &v) in db.iter_mut().zip(row) {
            *a += v.as_f64();
        }
    }
    let mut dx = F::zeros(n * d);
    gemm(n, k, d, dy, Trans::No, weight, Trans::No, &mut dx, false);
    (dx, dw, db.into_iter().map(F::of_f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference gradient of `f` at `x` along every coordinate.
    fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-5;
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = xp[i];
                xp[i] = orig + h;
                let up = f(&xp);
                xp[i] = orig - h;
                let down = f(&xp);
                xp[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    fn seq(n: usize, seed: u64) -> Vec<f64> {
        let mut r = crate::rng::RngStream::new(seed);
        (0..n).map(|_| r.uniform_in(-1.0, 1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn im2col_centre_column_is_input() {
        let (n, h, w, c) = (2, 3, 4, 2);
        let x = seq(n * h * w * c, 1);
        let cols = im2col(&x, n, h, w, c);
        for r in 0..n * h * w {
            assert_eq!(&cols[r * 9 * c + 4 * c..r * 9 * c + 5 * c], &x[r * c..(r + 1) * c]);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (n, h, w, c) = (2, 4, 3, 3);
        let x = seq(n * h * w * c, 2);
        let d = seq(n * h * w * 9 * c, 3);
        let lhs = dot(&im2col(&x, n, h, w, c), &d);
        let rhs = dot(&x, &col2im(&d, n, h, w, c));
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let (n, h, w, cin, cout) = (2, 4, 4, 2, 3);
        let x = seq(n * h * w * cin, 4);
        let wt = seq(9 * cin * cout, 5);
        let probe = seq(n * h * w * cout, 6);
        let m = n * h * w;
        let loss = |x: &[f64], wt: &[f64]| {
            dot(&conv_forward(&im2col(x, n, h, w, cin), wt, m, 9 * cin, cout), &probe)
        };
        let cols = im2col(&x, n, h, w, cin);
        let (dw, dcols) = conv_backward(&cols, &wt, &probe, m, 9 * cin, cout, true);
        let dx = col2im(&dcols.unwrap(), n, h, w, cin);
        assert!(max_rel_err(&dw, &numeric_grad(&wt, |v| loss(&x, v))) < 1e-6);
        assert!(max_rel_err(&dx, &numeric_grad(&x, |v| loss(v, &wt))) < 1e-6);
    }

    #[test]
    fn bn_gradients_match_finite_differences() {
        let (m, c) = (10, 3);
        let x = seq(m * c, 7);
        let scale = seq(c, 8);
        let shift = seq(c, 9);
        let probe = seq(m * c, 10);
        let loss = |x: &[f64], s: &[f64], b: &[f64]| dot(&bn_train_forward(x, m, c, s, b).y, &probe);
        let out = bn_train_forward(&x, m, c, &scale, &shift);
        let (dx, ds, db) = bn_backward(&probe, &out.xhat, &out.inv_std, &scale, m, c);
        assert!(max_rel_err(&dx, &numeric_grad(&x, |v| loss(v, &scale, &shift))) < 1e-5);
        assert!(max_rel_err(&ds, &numeric_grad(&scale, |v| loss(&x, v, &shift))) < 1e-6);
        assert!(max_rel_err(&db, &numeric_grad(&shift, |v| loss(&x, &scale, v))) < 1e-6);
    }

    #[test]
    fn bn_train_normalises_channels() {
        let (m, c) = (64, 4);
        let x: Vec<f64> = seq(m * c, 11).iter().enumerate().map(|(i, v)| v * 3.0 + (i % c) as f64).collect();
        let out = bn_train_forward(&x, m, c, &[1.0; 4], &[0.0; 4]);
        let (mean, var) = channel_stats(&out.y, m, c);
        for j in 0..c {
            assert!(mean[j].abs() < 1e-5);
            assert!((var[j] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn pools_gradients_match_finite_differences() {
        let (n, h, w, c) = (2, 4, 6, 2);
        let x = seq(n * h * w * c, 12);
        let probe = seq(n * (h / 2) * (w / 2) * c, 13);
        let dx = avg_pool2_backward(&probe, n, h, w, c);
        let num = numeric_grad(&x, |v| dot(&avg_pool2(v, n, h, w, c), &probe));
        assert!(max_rel_err(&dx, &num) < 1e-6);

        let probe = seq(n * c, 14);
        let dx = global_avg_pool_backward(&probe, n, h * w, c);
        let num = numeric_grad(&x, |v| dot(&global_avg_pool(v, n, h * w, c), &probe));
        assert!(max_rel_err(&dx, &num) < 1e-6);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let (n, d, k) = (3, 5, 4);
        let x = seq(n * d, 15);
        let wt = seq(k * d, 16);
        let b = seq(k, 17);
        let probe = seq(n * k, 18);
        let (dx, dw, db) = linear_backward(&x, &wt, &probe, n, d, k);
        let f = |x: &[f64], w: &[f64], b: &[f64]| dot(&linear_forward(x, w, b, n, d, k), &probe);
        assert!(max_rel_err(&dx, &numeric_grad(&x, |v| f(v, &wt, &b))) < 1e-6);
        assert!(max_rel_err(&dw, &numeric_grad(&wt, |v| f(&x, v, &b))) < 1e-6);
        assert!(max_rel_err(&db, &numeric_grad(&b, |v| f(&x, &wt, v))) < 1e-6);
    }

    #[test]
    fn relu_masks_gradient() {
        let mut x = vec![-1.0, 0.5, 0.0, 2.0];
        relu_inplace(&mut x);
        assert_eq!(x, vec![0.0, 0.5, 0.0, 2.0]);
        let mut dy = vec![1.0; 4];
        relu_backward(&mut dy, &x);
        assert_eq!(dy, vec![0.0, 1.0, 0.0, 1.0]);
    }
}
