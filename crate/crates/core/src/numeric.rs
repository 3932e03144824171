//! Scalar quadrature, discrete convolution and small least-squares helpers.
//!
//! The Volterra solvers spend nearly all of their time in [`dot`]; it is kept
//! branch-free over four accumulators so the optimizer can vectorize it. The
//! convolution entry points take an explicitly *reversed* kernel so that both
//! operands are walked forward in memory.

use nalgebra::{DMatrix, DVector};

/// Dot product with four independent accumulators, walked via
/// `chunks_exact` so the optimizer sees no bounds checks.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let rest: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (xa, xb) in ca.zip(cb) {
        acc[0] += xa[0] * xb[0];
        acc[1] += xa[1] * xb[1];
        acc[2] += xa[2] * xb[2];
        acc[3] += xa[3] * xb[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest
}

/// Accumulate shifted-window dot products:
/// `out[r] += Σ_s rev[c0 - r + s] · sig[s]` for every `r < out.len()`.
///
/// This is the history half of a blocked Volterra march. The windows for
/// consecutive `r` overlap by all but one sample, so walking `sig` in chunks
/// keeps both operands cache-resident; the naive march instead re-streams
/// the whole kernel from memory once per node, which is what dominated the
/// solve time. Callers must guarantee `c0 + 1 >= out.len()` and
/// `c0 + sig.len() <= rev.len()`.
pub fn shifted_history_dots(rev: &[f64], sig: &[f64], c0: usize, out: &mut [f64]) {
    if out.is_empty() || sig.is_empty() {
        return;
    }
    debug_assert!(c0 + 1 >= out.len());
    debug_assert!(c0 + sig.len() <= rev.len());
    #[cfg(target_arch = "x86_64")]
    {
        use std::sync::OnceLock;
        static LEVEL: OnceLock<u8> = OnceLock::new();
        let level = *LEVEL.get_or_init(|| {
            // RENEWALKIT_SIMD=avx512|avx2|scalar pins the path (debugging aid);
            // otherwise pick the widest feature set the CPU reports.
            match std::env::var("RENEWALKIT_SIMD").as_deref() {
                Ok("avx512") => return 2,
                Ok("avx2") => return 1,
                Ok("scalar") => return 0,
                _ => {}
            }
            if is_x86_feature_detected!("avx512f") {
                2
            } else if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                1
            } else {
                0
            }
        });
        // SAFETY: the feature the variant was compiled for was detected above.
        match level {
            2 => return unsafe { history_dots_avx512(rev, sig, c0, out) },
            1 => return unsafe { history_dots_avx2(rev, sig, c0, out) },
            _ => {}
        }
    }
    history_dots_body(rev, sig, c0, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn history_dots_avx512(rev: &[f64], sig: &[f64], c0: usize, out: &mut [f64]) {
    use std::arch::x86_64::*;
    const CHUNK: usize = 512;
    let mut s0 = 0;
    while s0 < sig.len() {
        let sl = CHUNK.min(sig.len() - s0);
        let sig_c = &sig[s0..s0 + sl];
        // Eight output nodes per pass: their kernel windows overlap by all
        // but one sample, so one kernel vector and one signal vector feed
        // eight FMAs, with the seven shifted windows synthesized in-register
        // (valignq) instead of loaded. The plain per-node loop costs two
        // loads per FMA and saturates the load ports at a fraction of the
        // FMA throughput; this brings it to ~0.25 loads per FMA.
        let sp = sig_c.as_ptr();
        let mut r = 0;
        while r + 8 <= out.len() && c0 - r + s0 >= 8 {
            let p0 = rev.as_ptr().add(c0 - r + s0);
            let mut acc = [_mm512_setzero_pd(); 8];
            let mut z0 = _mm512_castpd_si512(_mm512_loadu_pd(p0.sub(8)));
            let mut k = 0;
            while k + 8 <= sl {
                let s_v = _mm512_loadu_pd(sp.add(k));
                let z1p = _mm512_loadu_pd(p0.add(k));
                let z1 = _mm512_castpd_si512(z1p);
                acc[0] = _mm512_fmadd_pd(z1p, s_v, acc[0]);
                acc[1] = _mm512_fmadd_pd(
                    _mm512_castsi512_pd(_mm512_alignr_epi64::<7>(z1, z0)),
                    s_v,
                    acc[1],
                );
                acc[2] = _mm512_fmadd_pd(
                    _mm512_castsi512_pd(_mm512_alignr_epi64::<6>(z1, z0)),
                    s_v,
                    acc[2],
                );
                acc[3] = _mm512_fmadd_pd(
                    _mm512_castsi512_pd(_mm512_alignr_epi64::<5>(z1, z0)),
                    s_v,
                    acc[3],
                );
                acc[4] = _mm512_fmadd_pd(
                    _mm512_castsi512_pd(_mm512_alignr_epi64::<4>(z1, z0)),
                    s_v,
                    acc[4],
                );
                acc[5] = _mm512_fmadd_pd(
                    _mm512_castsi512_pd(_mm512_alignr_epi64::<3>(z1, z0)),
                    s_v,
                    acc[5],
                );
                acc[6] = _mm512_fmadd_pd(
                    _mm512_castsi512_pd(_mm512_alignr_epi64::<2>(z1, z0)),
                    s_v,
                    acc[6],
                );
                acc[7] = _mm512_fmadd_pd(
                    _mm512_castsi512_pd(_mm512_alignr_epi64::<1>(z1, z0)),
                    s_v,
                    acc[7],
                );
                z0 = z1;
                k += 8;
            }
            let mut red = [0.0f64; 8];
            for q in 0..8 {
                red[q] = _mm512_reduce_add_pd(acc[q]);
            }
            while k < sl {
                let sv = *sp.add(k);
                for q in 0..8 {
                    red[q] += *p0.sub(q).add(k) * sv;
                }
                k += 1;
            }
            for q in 0..8 {
                *out.get_unchecked_mut(r + q) += red[q];
            }
            r += 8;
        }
        while r < out.len() {
            let a = &rev[c0 - r + s0..c0 - r + s0 + sl];
            let mut v0 = _mm512_setzero_pd();
            let mut v1 = _mm512_setzero_pd();
            let mut k = 0;
            while k + 16 <= sl {
                v0 = _mm512_fmadd_pd(
                    _mm512_loadu_pd(a.as_ptr().add(k)),
                    _mm512_loadu_pd(sig_c.as_ptr().add(k)),
                    v0,
                );
                v1 = _mm512_fmadd_pd(
                    _mm512_loadu_pd(a.as_ptr().add(k + 8)),
                    _mm512_loadu_pd(sig_c.as_ptr().add(k + 8)),
                    v1,
                );
                k += 16;
            }
            let mut acc = _mm512_reduce_add_pd(_mm512_add_pd(v0, v1));
            while k < sl {
                acc += a[k] * sig_c[k];
                k += 1;
            }
            *out.get_unchecked_mut(r) += acc;
            r += 1;
        }
        s0 += sl;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn history_dots_avx2(rev: &[f64], sig: &[f64], c0: usize, out: &mut [f64]) {
    use std::arch::x86_64::*;
    const CHUNK: usize = 512;
    let mut s0 = 0;
    while s0 < sig.len() {
        let sl = CHUNK.min(sig.len() - s0);
        let sig_c = &sig[s0..s0 + sl];
        // four nodes per pass share each signal load; see the avx512 variant
        let sp = sig_c.as_ptr();
        let mut r = 0;
        while r + 4 <= out.len() {
            let p0 = rev.as_ptr().add(c0 - r + s0);
            let mut acc = [_mm256_setzero_pd(); 4];
            let mut k = 0;
            while k + 4 <= sl {
                let s_v = _mm256_loadu_pd(sp.add(k));
                acc[0] = _mm256_fmadd_pd(_mm256_loadu_pd(p0.add(k)), s_v, acc[0]);
                acc[1] = _mm256_fmadd_pd(_mm256_loadu_pd(p0.sub(1).add(k)), s_v, acc[1]);
                acc[2] = _mm256_fmadd_pd(_mm256_loadu_pd(p0.sub(2).add(k)), s_v, acc[2]);
                acc[3] = _mm256_fmadd_pd(_mm256_loadu_pd(p0.sub(3).add(k)), s_v, acc[3]);
                k += 4;
            }
            let mut red = [0.0f64; 4];
            for q in 0..4 {
                let v = acc[q];
                let lo = _mm256_castpd256_pd128(v);
                let hi = _mm256_extractf128_pd(v, 1);
                let pair = _mm_add_pd(lo, hi);
                red[q] = _mm_cvtsd_f64(pair) + _mm_cvtsd_f64(_mm_unpackhi_pd(pair, pair));
            }
            while k < sl {
                let sv = *sp.add(k);
                for q in 0..4 {
                    red[q] += *p0.sub(q).add(k) * sv;
                }
                k += 1;
            }
            for q in 0..4 {
                *out.get_unchecked_mut(r + q) += red[q];
            }
            r += 4;
        }
        while r < out.len() {
            let o = out.get_unchecked_mut(r);
            let a = &rev[c0 - r + s0..c0 - r + s0 + sl];
            let mut v0 = _mm256_setzero_pd();
            let mut v1 = _mm256_setzero_pd();
            let mut k = 0;
            while k + 8 <= sl {
                v0 = _mm256_fmadd_pd(
                    _mm256_loadu_pd(a.as_ptr().add(k)),
                    _mm256_loadu_pd(sig_c.as_ptr().add(k)),
                    v0,
                );
                v1 = _mm256_fmadd_pd(
                    _mm256_loadu_pd(a.as_ptr().add(k + 4)),
                    _mm256_loadu_pd(sig_c.as_ptr().add(k + 4)),
                    v1,
                );
                k += 8;
            }
            let v = _mm256_add_pd(v0, v1);
            let lo = _mm256_castpd256_pd128(v);
            let hi = _mm256_extractf128_pd(v, 1);
            let pair = _mm_add_pd(lo, hi);
            let mut acc = _mm_cvtsd_f64(pair) + _mm_cvtsd_f64(_mm_unpackhi_pd(pair, pair));
            while k < sl {
                acc += a[k] * sig_c[k];
                k += 1;
            }
            *o += acc;
            r += 1;
        }
        s0 += sl;
    }
}

/// Portable fallback body.
fn history_dots_body(rev: &[f64], sig: &[f64], c0: usize, out: &mut [f64]) {
    // chunk so sig plus the union of kernel windows stay inside L1
    const CHUNK: usize = 512;
    let mut s0 = 0;
    while s0 < sig.len() {
        let sl = CHUNK.min(sig.len() - s0);
        let sig_c = &sig[s0..s0 + sl];
        for (r, o) in out.iter_mut().enumerate() {
            let base = c0 - r + s0;
            *o += dot(&rev[base..base + sl], sig_c);
        }
        s0 += sl;
    }
}

/// Trapezoid rule over uniformly spaced samples.
pub fn trapezoid(y: &[f64], dt: f64) -> f64 {
    if y.len() < 2 {
        return 0.0;
    }
    let inner: f64 = y[1..y.len() - 1].iter().sum();
    dt * (0.5 * (y[0] + y[y.len() - 1]) + inner)
}

/// Running trapezoid integral; output has the same length, starts at 0.
pub fn cumulative_trapezoid(y: &[f64], dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(y.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in y.windows(2) {
        acc += 0.5 * dt * (w[0] + w[1]);
        out.push(acc);
    }
    out
}

/// First moment `∫ t·y(t) dt` by the trapezoid rule.
pub fn first_moment(y: &[f64], dt: f64) -> f64 {
    if y.len() < 2 {
        return 0.0;
    }
    let weighted: Vec<f64> = y
        .iter()
        .enumerate()
        .map(|(i, v)| i as f64 * dt * v)
        .collect();
    trapezoid(&weighted, dt)
}

/// Laplace transform value `∫ y(t) e^{-z t} dt` over the sampled window.
pub fn laplace_value(y: &[f64], dt: f64, z: f64) -> f64 {
    if y.len() < 2 {
        return 0.0;
    }
    let damped: Vec<f64> = y
        .iter()
        .enumerate()
        .map(|(i, v)| v * (-z * i as f64 * dt).exp())
        .collect();
    trapezoid(&damped, dt)
}

/// Reversed copy of a series, for use with the `*_rev` convolutions.
pub fn reversed(v: &[f64]) -> Vec<f64> {
    let mut r = v.to_vec();
    r.reverse();
    r
}

/// Product-trapezoid convolution at node `n`, *excluding* the zero-lag term
/// `(dt/2)·k[0]·s[n]`. `rev` is the reversed kernel (`rev[i] = k[L-1-i]`);
/// the signal only needs nodes `0..n`. Used to assemble the right-hand side
/// before the implicit zero-lag solve.
#[inline]
pub fn conv_tail_rev(rev: &[f64], signal: &[f64], n: usize, dt: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let l = rev.len();
    debug_assert!(n < l);
    let base = l - 1 - n;
    let d = dot(&rev[base..l - 1], &signal[..n]);
    dt * (d - 0.5 * rev[base] * signal[0])
}

/// Full product-trapezoid convolution `∫_0^{t_n} k(t_n - s) s(s) ds`.
#[inline]
pub fn conv_full_rev(rev: &[f64], signal: &[f64], n: usize, dt: f64) -> f64 {
    let tail = conv_tail_rev(rev, signal, n, dt);
    if n == 0 {
        0.0
    } else {
        tail + 0.5 * dt * rev[rev.len() - 1] * signal[n]
    }
}

/// Convolution of two sampled series on their whole common grid, O(n²).
pub fn convolve(kernel: &[f64], signal: &[f64], dt: f64) -> Vec<f64> {
    debug_assert_eq!(kernel.len(), signal.len());
    let rev = reversed(kernel);
    (0..kernel.len())
        .map(|n| conv_full_rev(&rev, signal, n, dt))
        .collect()
}

/// Least-squares affine fit `y ≈ intercept + slope·x`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    debug_assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let det = n * sxx - sx * sx;
    if det.abs() < 1e-300 {
        return (sy / n.max(1.0), 0.0);
    }
    let slope = (n * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / n;
    (intercept, slope)
}

/// Largest absolute difference between two equally long series.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Non-negative least squares, Lawson–Hanson active-set iteration.
///
/// Returns the minimizer of `‖A x − b‖₂` over `x ≥ 0` together with the
/// residual norm. Matrix sizes here are small (dictionary fits), so the
/// passive-set subproblems are solved by SVD.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, f64) {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let grad_scale = (a.transpose() * b).amax().max(1e-300);
    let tol = 1e-12 * grad_scale;

    let solve_passive = |passive: &[bool]| -> DVector<f64> {
        let cols: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        if cols.is_empty() {
            return DVector::zeros(n);
        }
        let sub = DMatrix::from_fn(a.nrows(), cols.len(), |i, jc| a[(i, cols[jc])]);
        let sol = sub
            .svd(true, true)
            .solve(b, 1e-13)
            .unwrap_or_else(|_| DVector::zeros(cols.len()));
        let mut z = DVector::zeros(n);
        for (jc, &j) in cols.iter().enumerate() {
            z[j] = sol[jc];
        }
        z
    };

    for _outer in 0..4 * n {
        let w = a.transpose() * (b - a * &x);
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if !passive[j] && w[j] > tol {
                if best.map_or(true, |(_, bw)| w[j] > bw) {
                    best = Some((j, w[j]));
                }
            }
        }
        let Some((j_new, _)) = best else { break };
        passive[j_new] = true;

        loop {
            let z = solve_passive(&passive);
            let mut alpha = 1.0f64;
            let mut blocker = None;
            for j in 0..n {
                if passive[j] && z[j] <= 0.0 {
                    let step = x[j] / (x[j] - z[j]);
                    if step < alpha {
                        alpha = step;
                        blocker = Some(j);
                    }
                }
            }
            if blocker.is_none() {
                x = z;
                break;
            }
            for j in 0..n {
                if passive[j] {
                    x[j] += alpha * (z[j] - x[j]);
                }
            }
            for j in 0..n {
                if passive[j] && x[j] <= tol.max(1e-14) {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    let resid = (b - a * &x).norm();
    (x, resid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn trapezoid_integrates_exponential() {
        let dt = 1e-3;
        let y: Vec<f64> = (0..=20_000).map(|i| (-(i as f64) * dt).exp()).collect();
        // exact: 1 - e^{-20}; trapezoid error O(dt^2)
        assert_relative_eq!(
            trapezoid(&y, dt),
            1.0 - (-20.0f64).exp(),
            max_relative = 1e-7
        );
    }

    #[test]
    fn cumulative_matches_total() {
        let dt = 0.01;
        let y: Vec<f64> = (0..=500).map(|i| (i as f64 * dt).sin()).collect();
        let c = cumulative_trapezoid(&y, dt);
        assert_eq!(c.len(), y.len());
        assert_relative_eq!(c[y.len() - 1], trapezoid(&y, dt), epsilon = 1e-12);
        assert_eq!(c[0], 0.0);
    }

    #[test]
    fn first_moment_of_unit_exponential_is_one() {
        let dt = 1e-3;
        let y: Vec<f64> = (0..=30_000).map(|i| (-(i as f64) * dt).exp()).collect();
        assert_relative_eq!(first_moment(&y, dt), 1.0, max_relative = 1e-6);
    }

    #[test]
    fn laplace_of_exponential_matches_closed_form() {
        // ∫ e^{-t} e^{-z t} dt = 1/(1+z); truncation at t=30 is ~1e-14 and
        // the trapezoid rule is biased by (2 dt)^2/12 relative
        let dt = 1e-3;
        let y: Vec<f64> = (0..=30_000).map(|i| (-(i as f64) * dt).exp()).collect();
        assert_relative_eq!(laplace_value(&y, dt, 1.0), 0.5, max_relative = 1e-6);
    }

    #[test]
    fn convolution_of_exponentials_is_erlang() {
        // e^{-t} * e^{-t} = t e^{-t}
        let dt = 1e-3;
        let n = 5000;
        let k: Vec<f64> = (0..=n).map(|i| (-(i as f64) * dt).exp()).collect();
        let c = convolve(&k, &k, dt);
        for (i, v) in c.iter().enumerate().step_by(500) {
            let t = i as f64 * dt;
            assert_relative_eq!(*v, t * (-t).exp(), epsilon = 1e-6);
        }
    }

    #[test]
    fn conv_split_tail_plus_zero_lag_equals_full() {
        let dt = 0.01;
        let k: Vec<f64> = (0..=100).map(|i| 1.0 / (1.0 + i as f64 * dt)).collect();
        let s: Vec<f64> = (0..=100).map(|i| (i as f64 * dt).cos()).collect();
        let rev = reversed(&k);
        for n in [0usize, 1, 7, 100] {
            let full = conv_full_rev(&rev, &s, n, dt);
            let split = conv_tail_rev(&rev, &s, n, dt)
                + if n == 0 { 0.0 } else { 0.5 * dt * k[0] * s[n] };
            assert_relative_eq!(full, split, epsilon = 1e-14);
        }
    }

    #[test]
    fn linear_fit_recovers_line() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 3.0 * x).collect();
        let (b, m) = linear_fit(&xs, &ys);
        assert_relative_eq!(b, 2.0, epsilon = 1e-10);
        assert_relative_eq!(m, -3.0, epsilon = 1e-10);
    }

    #[test]
    fn nnls_matches_unconstrained_when_solution_positive() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        let (x, _r) = nnls(&a, &b);
        // normal equations solution is (1, 2), already nonnegative
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(x[1], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn nnls_clamps_negative_component() {
        // best unconstrained fit would need a negative weight on column 2
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let b = DVector::from_row_slice(&[1.0, -0.5]);
        let (x, _) = nnls(&a, &b);
        assert!(x[0] >= 0.0 && x[1] >= 0.0);
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(x[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn nnls_recovers_sparse_mixture_of_exponentials() {
        let dt = 0.05;
        let rates = [0.5, 1.0, 2.0, 4.0];
        let rows = 200;
        let a = DMatrix::from_fn(rows, rates.len(), |i, j| (-(rates[j]) * i as f64 * dt).exp());
        let truth = [0.0, 0.7, 0.0, 0.3];
        let b = &a * DVector::from_row_slice(&truth);
        let (x, r) = nnls(&a, &b);
        assert!(r < 1e-10);
        for (xi, ti) in x.iter().zip(truth.iter()) {
            assert_relative_eq!(*xi, *ti, epsilon = 1e-7);
        }
    }
}
