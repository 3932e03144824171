//! Kernel diagnostics: memory classification, spectral structure under
//! detailed balance, and long-time asymptotics of the renewal system.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernel::ScalarKernelSet;
use crate::network::{CompartmentSystem, DetailedBalanceCertificate, EntranceVerdict};
use crate::numeric::{dot, first_moment, laplace_value, linear_fit, nnls, trapezoid};
use nalgebra::{DMatrix, DVector};

/// Laplace transform of the transfer kernels arranged as a matrix acting on
/// arrival-flux vectors: entry `(b, a)` is the transform of `Phi_{a->b}`.
/// At `z = 0` this is column-stochastic exactly when every compartment
/// passes on all the mass it receives.
pub fn laplace_transfer_matrix(scalar: &ScalarKernelSet, z: f64) -> DMatrix<f64> {
    let m = scalar.n_compartments();
    let dt = scalar.grid().dt();
    let mut out = DMatrix::zeros(m, m);
    for ((a, b), series) in scalar.pairs() {
        out[(b, a)] = laplace_value(series, dt, z);
    }
    out
}

// ---------------------------------------------------------------------------
// Markovianity
// ---------------------------------------------------------------------------

/// Outcome of testing whether every transfer kernel is a pure exponential
/// with a shared per-compartment rate — i.e. whether the reduced system is
/// memoryless and equivalent to a plain rate network between compartments.
#[derive(Debug, Clone)]
pub struct MarkovVerdict {
    pub accepted: bool,
    /// Per-compartment departure rates (0 for compartments that never emit).
    pub rates: Vec<f64>,
    /// Recovered compartment-level generator, present only when accepted.
    pub generator: Option<DMatrix<f64>>,
    /// Worst relative deviation from log-linearity across all kernels.
    pub max_affinity_dev: f64,
    /// Worst relative mismatch between fitted slopes / rate sums.
    pub max_rate_dev: f64,
    /// Human-readable reasons for rejection (empty when accepted).
    pub evidence: Vec<String>,
}

const MASS_FLOOR: f64 = 1e-12;

/// Decide whether the kernel set is exponential (memoryless).
///
/// For every emitting compartment the departure density is fitted on a
/// log scale over an adaptive window (five expected lifetimes, capped at
/// 90% of the grid); each transfer kernel must be log-affine on that window
/// with slope matching the compartment rate, and the zero-lag values must
/// sum to that rate. A kernel carrying mass but vanishing at zero lag is
/// immediate evidence of memory (multi-stage passage).
pub fn markovianity_test(scalar: &ScalarKernelSet, tol: f64) -> Result<MarkovVerdict> {
    let grid = scalar.grid();
    let dt = grid.dt();
    let len = grid.len();
    let m = scalar.n_compartments();
    let mut evidence = Vec::new();
    let mut rates = vec![0.0; m];
    let mut lambda0: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    let mut max_affinity_dev = 0.0f64;
    let mut max_rate_dev = 0.0f64;

    let fit_log = |series: &[f64], window: usize, what: &str| -> Result<(f64, f64, f64)> {
        let mut xs = Vec::with_capacity(window);
        let mut ys = Vec::with_capacity(window);
        for n in 0..window {
            if series[n] <= 0.0 {
                return Err(Error::Unsupported(format!(
                    "{what} is not strictly positive on the fit window; \
                     log-linearity cannot be assessed"
                )));
            }
            xs.push(n as f64 * dt);
            ys.push(series[n].ln());
        }
        let (intercept, slope) = linear_fit(&xs, &ys);
        let mut dev = 0.0f64;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for n in 0..window {
            dev = dev.max((ys[n] - (intercept + slope * xs[n])).abs());
            lo = lo.min(ys[n]);
            hi = hi.max(ys[n]);
        }
        Ok((intercept, slope, dev / (hi - lo).max(1.0)))
    };

    for alpha in 0..m {
        let k = scalar.k(alpha);
        let k_mass = trapezoid(k, dt);
        if k_mass <= MASS_FLOOR {
            continue; // never emits; trivially memoryless
        }
        if k[0] <= 0.0 {
            evidence.push(format!(
                "departure density of compartment {} vanishes at zero lag yet carries \
                 mass {k_mass:.3e}: departures need a hidden multi-stage passage",
                scalar.labels()[alpha]
            ));
            continue;
        }
        // pass 1: crude rate from the first few nodes
        let w0 = (len / 100).max(10).min(len);
        let (_, slope0, _) = fit_log(k, w0, "departure density")?;
        let r_crude = (-slope0).max(1e-3 / grid.t_max());
        // pass 2: refit over five expected lifetimes
        let window_t = (5.0 / r_crude).min(0.9 * grid.t_max());
        let window = ((window_t / dt) as usize).clamp(w0, len);
        let (_, slope, aff) = fit_log(k, window, "departure density")?;
        let r = -slope;
        max_affinity_dev = max_affinity_dev.max(aff);
        if r <= 0.0 {
            evidence.push(format!(
                "departure density of compartment {} does not decay",
                scalar.labels()[alpha]
            ));
            continue;
        }
        if aff > tol {
            evidence.push(format!(
                "departure density of compartment {} deviates from log-linearity by {aff:.3e}",
                scalar.labels()[alpha]
            ));
        }
        rates[alpha] = r;

        for ((a, b), series) in scalar.pairs() {
            if a != alpha {
                continue;
            }
            let mass = trapezoid(series, dt);
            if mass <= MASS_FLOOR {
                continue;
            }
            if series[0] <= 0.0 {
                evidence.push(format!(
                    "kernel {} -> {} vanishes at zero lag yet carries mass {mass:.3e}: \
                     transfers pass through hidden stages",
                    scalar.labels()[a],
                    scalar.labels()[b]
                ));
                continue;
            }
            let (_, pslope, paff) = fit_log(series, window, "transfer kernel")?;
            max_affinity_dev = max_affinity_dev.max(paff);
            let slope_dev = (-pslope - r).abs() / r.max(1.0);
            max_rate_dev = max_rate_dev.max(slope_dev);
            if paff > tol {
                evidence.push(format!(
                    "kernel {} -> {} deviates from log-linearity by {paff:.3e}",
                    scalar.labels()[a],
                    scalar.labels()[b]
                ));
            }
            if slope_dev > tol {
                evidence.push(format!(
                    "kernel {} -> {} decays at {:.6} but the compartment departs at {r:.6}",
                    scalar.labels()[a],
                    scalar.labels()[b],
                    -pslope
                ));
            }
            lambda0[alpha].push((b, series[0]));
        }
        let sum0: f64 = lambda0[alpha].iter().map(|(_, v)| v).sum();
        let sum_dev = (sum0 - r).abs() / r.max(1.0);
        max_rate_dev = max_rate_dev.max(sum_dev);
        if sum_dev > tol {
            evidence.push(format!(
                "zero-lag kernel values of compartment {} sum to {sum0:.6}, \
                 not the departure rate {r:.6}",
                scalar.labels()[alpha]
            ));
        }
    }

    let accepted = evidence.is_empty();
    let generator = accepted.then(|| {
        let mut g = DMatrix::zeros(m, m);
        for alpha in 0..m {
            for &(beta, rate) in &lambda0[alpha] {
                g[(beta, alpha)] = rate;
            }
            g[(alpha, alpha)] = -rates[alpha];
        }
        g
    });
    Ok(MarkovVerdict {
        accepted,
        rates,
        generator,
        max_affinity_dev,
        max_rate_dev,
        evidence,
    })
}

// ---------------------------------------------------------------------------
// Detailed balance: spectral kernel form
// ---------------------------------------------------------------------------

/// Transfer kernel written as a nonnegative mixture of decaying
/// exponentials, `Phi(t) = rate · sum_r weight_r · exp(-nu_r t)`.
/// Existence of this form with nonnegative weights summing to one is the
/// signature of a reversible internal structure probed at a single state.
#[derive(Debug, Clone)]
pub struct SpectralKernel {
    pub rate: f64,
    pub weights: Vec<f64>,
    pub decay_rates: Vec<f64>,
}

impl SpectralKernel {
    pub fn eval(&self, t: f64) -> f64 {
        let s: f64 = self
            .weights
            .iter()
            .zip(&self.decay_rates)
            .map(|(w, nu)| w * (-nu * t).exp())
            .sum();
        self.rate * s
    }

    pub fn sample(&self, grid: &TimeGrid) -> Vec<f64> {
        grid.sample(|t| self.eval(t))
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn min_weight(&self) -> f64 {
        self.weights.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Spectral form of the kernel `alpha -> beta` for a certified reversible
/// network. Requires all departures toward `beta` to originate at the
/// entrance state of `alpha` (the kernel is then a diagonal matrix element
/// of a symmetrizable semigroup, hence a nonnegative mixture).
pub fn detailed_balance_kernel(
    system: &CompartmentSystem,
    cert: &DetailedBalanceCertificate,
    alpha: usize,
    beta: usize,
) -> Result<SpectralKernel> {
    let mu = cert.mu().ok_or_else(|| {
        Error::Unsupported("network carries no detailed-balance certificate".into())
    })?;
    let entrance = match system.entrance_verdict(alpha) {
        EntranceVerdict::Unique(i) => i,
        EntranceVerdict::None => {
            return Err(Error::Unsupported(format!(
                "compartment {alpha} is never entered; no kernel to analyze"
            )))
        }
        EntranceVerdict::Multiple(states) => {
            return Err(Error::Unsupported(format!(
                "compartment {alpha} is entered at states {states:?}; \
                 the spectral form needs a single entrance"
            )))
        }
    };
    let a = system.network().matrix();
    let states_a = system.states_of(alpha);
    let states_b = system.states_of(beta);

    let mut bridge_rate = 0.0;
    for &j in states_a {
        let toward: f64 = states_b.iter().map(|&i| a[(i, j)]).sum();
        if toward > 0.0 && j != entrance {
            return Err(Error::Unsupported(format!(
                "departures toward compartment {beta} originate at state {j}, \
                 not at the entrance {entrance}; the kernel is not a diagonal \
                 matrix element of the internal semigroup"
            )));
        }
        if j == entrance {
            bridge_rate = toward;
        }
    }
    if bridge_rate <= 0.0 {
        return Err(Error::Unsupported(format!(
            "compartment {alpha} never feeds compartment {beta}"
        )));
    }

    // symmetrize the internal block with the stationary weights
    let na = states_a.len();
    let mut s = DMatrix::zeros(na, na);
    for (p, &i) in states_a.iter().enumerate() {
        for (q, &j) in states_a.iter().enumerate() {
            s[(p, q)] = a[(i, j)] * (mu[j] / mu[i]).sqrt();
        }
    }
    let scale = s.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()));
    let asym = (&s - s.transpose()).iter().fold(0.0f64, |acc, &x| acc.max(x.abs()));
    if asym > 1e-8 * scale.max(1.0) {
        return Err(Error::Numeric(format!(
            "internal block is not symmetrizable within tolerance (deviation {asym:.3e})"
        )));
    }
    let s = (&s + s.transpose()) * 0.5;
    let eig = s.symmetric_eigen();
    let loc = states_a.iter().position(|&i| i == entrance).unwrap();

    let mut weights = Vec::with_capacity(na);
    let mut decay_rates = Vec::with_capacity(na);
    for r in 0..na {
        let nu = -eig.eigenvalues[r];
        if nu < -1e-10 * scale.max(1.0) {
            return Err(Error::Numeric(format!(
                "internal block has a growing mode (rate {nu:.3e})"
            )));
        }
        decay_rates.push(nu.max(0.0));
        weights.push(eig.eigenvectors[(loc, r)].powi(2));
    }
    Ok(SpectralKernel {
        rate: bridge_rate,
        weights,
        decay_rates,
    })
}

// ---------------------------------------------------------------------------
// Complete monotonicity / mixture fits
// ---------------------------------------------------------------------------

/// Result of the alternating-finite-difference probe for complete
/// monotonicity (`(-1)^k d^k f / dt^k >= 0`).
#[derive(Debug, Clone)]
pub struct CmReport {
    pub consistent: bool,
    /// `(difference order, time)` of the first violation found.
    pub first_violation: Option<(usize, f64)>,
    pub checked_orders: usize,
}

/// Check sampled data for consistency with complete monotonicity up to the
/// given finite-difference order. Violations well beyond the noise floor
/// rule out any nonnegative mixture-of-exponentials representation.
pub fn complete_monotonicity_check(
    samples: &[f64],
    dt: f64,
    max_order: usize,
    rel_tol: f64,
) -> CmReport {
    let stride = (samples.len() / 100).max(1);
    let sub: Vec<f64> = samples.iter().step_by(stride).cloned().collect();
    let scale = sub.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(1e-300);
    let mut diffs = sub.clone();
    for order in 0..=max_order {
        let tol = rel_tol * scale * (2.0f64).powi(order as i32) + 1e-14 * scale;
        let sign = if order % 2 == 0 { 1.0 } else { -1.0 };
        for (i, &d) in diffs.iter().enumerate() {
            if sign * d < -tol {
                return CmReport {
                    consistent: false,
                    first_violation: Some((order, i as f64 * stride as f64 * dt)),
                    checked_orders: order,
                };
            }
        }
        for i in 0..diffs.len().saturating_sub(1) {
            diffs[i] = diffs[i + 1] - diffs[i];
        }
        diffs.pop();
        if diffs.is_empty() {
            break;
        }
    }
    CmReport {
        consistent: true,
        first_violation: None,
        checked_orders: max_order,
    }
}

/// Best nonnegative mixture of decaying exponentials for sampled data.
#[derive(Debug, Clone)]
pub struct MixtureFit {
    pub rates: Vec<f64>,
    pub weights: Vec<f64>,
    /// Sup-norm residual over all sample nodes.
    pub sup_residual: f64,
}

/// Fit `sum_j w_j exp(-r_j t)` with `w_j >= 0` over a fixed rate dictionary.
pub fn nonneg_mixture_fit_with_rates(samples: &[f64], dt: f64, rates: &[f64]) -> MixtureFit {
    let len = samples.len();
    let row_stride = (len / 512).max(1);
    let rows: Vec<usize> = (0..len).step_by(row_stride).collect();
    let mut a = DMatrix::zeros(rows.len(), rates.len());
    let mut b = DVector::zeros(rows.len());
    for (ri, &n) in rows.iter().enumerate() {
        let t = n as f64 * dt;
        for (j, &r) in rates.iter().enumerate() {
            a[(ri, j)] = (-r * t).exp();
        }
        b[ri] = samples[n];
    }
    let (w, _) = nnls(&a, &b);
    let mut sup = 0.0f64;
    for (n, &s) in samples.iter().enumerate() {
        let t = n as f64 * dt;
        let fit: f64 = rates
            .iter()
            .zip(w.iter())
            .map(|(&r, &wj)| wj * (-r * t).exp())
            .sum();
        sup = sup.max((fit - s).abs());
    }
    MixtureFit {
        rates: rates.to_vec(),
        weights: w.iter().cloned().collect(),
        sup_residual: sup,
    }
}

/// Fit against a log-spaced dictionary spanning slow-to-fast decays for the
/// sampled horizon.
pub fn nonneg_mixture_fit(samples: &[f64], dt: f64, n_atoms: usize) -> MixtureFit {
    let t_max = dt * (samples.len().saturating_sub(1)) as f64;
    let r_min = 0.2 / t_max.max(dt);
    let r_max = 2.0 / dt;
    let n = n_atoms.max(2);
    let rates: Vec<f64> = (0..n)
        .map(|j| r_min * (r_max / r_min).powf(j as f64 / (n - 1) as f64))
        .collect();
    nonneg_mixture_fit_with_rates(samples, dt, &rates)
}

// ---------------------------------------------------------------------------
// Long-time asymptotics
// ---------------------------------------------------------------------------

/// Stationary cycling structure of the transfer matrix at `z = 0`.
#[derive(Debug, Clone)]
pub struct PerronVectors {
    /// Right eigenvector (stationary arrival-flux shape), sums to one.
    pub v: DVector<f64>,
    /// Left eigenvector, scaled so `u . v = 1`.
    pub u: DVector<f64>,
    pub residual: f64,
}

/// Unit-eigenvalue left/right vectors of a nonnegative irreducible matrix.
pub fn perron(m: &DMatrix<f64>, tol: f64) -> Result<PerronVectors> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n {
        return Err(Error::InvalidInput("perron needs a square matrix".into()));
    }
    let scale = m.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(1e-300);
    if m.iter().any(|&x| x < -1e-12 * scale) {
        return Err(Error::InvalidInput(
            "perron needs a nonnegative matrix".into(),
        ));
    }
    // irreducibility via reachability in both directions
    let cutoff = 1e-12 * scale;
    let reach = |transpose: bool| -> Vec<bool> {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let w = if transpose { m[(j, i)] } else { m[(i, j)] };
                if w > cutoff && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen
    };
    if reach(false).iter().any(|&s| !s) || reach(true).iter().any(|&s| !s) {
        return Err(Error::Unsupported(
            "transfer matrix at z = 0 is reducible; no unique stationary cycle".into(),
        ));
    }

    let shifted = m - DMatrix::identity(n, n);
    let svd = shifted.clone().svd(true, true);
    let u_mat = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut v = DVector::from_iterator(n, (0..n).map(|j| vt[(n - 1, j)]));
    let mut u = DVector::from_iterator(n, (0..n).map(|i| u_mat[(i, n - 1)]));

    let fix_sign = |x: &mut DVector<f64>| -> Result<()> {
        let pos = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let neg = x.iter().cloned().fold(f64::INFINITY, f64::min);
        if pos > 1e-10 && neg < -1e-10 {
            return Err(Error::Numeric(
                "stationary vector changes sign; unit eigenvalue is not simple".into(),
            ));
        }
        if pos <= 1e-10 {
            *x = -x.clone();
        }
        Ok(())
    };
    fix_sign(&mut v)?;
    fix_sign(&mut u)?;

    let res_v = (&shifted * &v).amax();
    let res_u = (shifted.transpose() * &u).amax();
    let residual = res_v.max(res_u);
    if residual > tol {
        return Err(Error::Numeric(format!(
            "no unit eigenvalue within tolerance (residual {residual:.3e})"
        )));
    }
    let sum_v: f64 = v.iter().sum();
    if sum_v <= 0.0 {
        return Err(Error::Numeric("stationary vector has no mass".into()));
    }
    v /= sum_v;
    let uv = u.dot(&v);
    if uv.abs() < 1e-300 {
        return Err(Error::Numeric("left and right vectors are orthogonal".into()));
    }
    u /= uv;
    Ok(PerronVectors { v, u, residual })
}

/// Long-time behavior of the renewal system driven by the attached forcing.
#[derive(Debug, Clone)]
pub struct Asymptotics {
    /// Overall cycling amplitude set by the initial data.
    pub c0: f64,
    /// Stationary arrival-flux shape (sums to one).
    pub v: Vec<f64>,
    /// Left unit-eigenvalue vector (`u . v = 1`).
    pub u: Vec<f64>,
    /// Limiting arrival fluxes `c0 * v`.
    pub b_inf: Vec<f64>,
    /// Limiting contents: flux times mean sojourn time.
    pub n_inf: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Limits of arrival fluxes and contents as `t -> oo` for a conservative
/// kernel set with attached forcing.
///
/// The limit exists when the transfer matrix at `z = 0` is column-stochastic
/// (within `mass_tol`) and irreducible: the fluxes settle onto the stationary
/// shape `v` with amplitude fixed by the total forcing mass and the mean
/// cycle time `u . (D v)`, where `D` holds kernel first moments.
pub fn long_time_limits(scalar: &ScalarKernelSet, mass_tol: f64) -> Result<Asymptotics> {
    if !scalar.has_forcing() {
        return Err(Error::InvalidInput(
            "no forcing attached to the kernel set; nothing to propagate".into(),
        ));
    }
    let m = scalar.n_compartments();
    let dt = scalar.grid().dt();
    let m0 = laplace_transfer_matrix(scalar, 0.0);
    for a in 0..m {
        let colsum: f64 = (0..m).map(|b| m0[(b, a)]).sum();
        if (colsum - 1.0).abs() > mass_tol {
            return Err(Error::Unsupported(format!(
                "compartment {} passes on mass {colsum:.8} instead of 1 \
                 (leak or truncation); the stationary cycle is undefined",
                scalar.labels()[a]
            )));
        }
    }
    // columns are stochastic only up to mass_tol (quadrature error), so the
    // unit-eigenvalue residual inherits the same slack
    let pv = perron(&m0, mass_tol.max(1e-8))?;

    let mut warnings = Vec::new();
    let mut d = DMatrix::zeros(m, m);
    for ((a, b), series) in scalar.pairs() {
        d[(b, a)] = first_moment(series, dt);
        let peak = series.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()));
        if series[series.len() - 1] > 1e-8 * peak.max(1e-300) {
            warnings.push(format!(
                "kernel {} -> {} has not decayed by the end of the grid; \
                 moments are truncated",
                scalar.labels()[a],
                scalar.labels()[b]
            ));
        }
    }
    let denom = pv.u.dot(&(&d * &pv.v));
    if !(denom > 0.0) {
        return Err(Error::Numeric(format!(
            "mean cycle time {denom:.3e} is not positive"
        )));
    }
    let b0_mass = DVector::from_iterator(
        m,
        (0..m).map(|alpha| trapezoid(scalar.b0(alpha), dt)),
    );
    let c0 = pv.u.dot(&b0_mass) / denom;

    let b_inf: Vec<f64> = (0..m).map(|alpha| c0 * pv.v[alpha]).collect();
    let n_inf: Vec<f64> = (0..m)
        .map(|alpha| c0 * pv.v[alpha] * first_moment(scalar.k(alpha), dt))
        .collect();
    Ok(Asymptotics {
        c0,
        v: pv.v.iter().cloned().collect(),
        u: pv.u.iter().cloned().collect(),
        b_inf,
        n_inf,
        warnings,
    })
}

/// Exponential decay rate of `|series - limit|` fitted over the tail.
/// Returns `None` when the series sits at the limit (to rounding) too soon
/// to support a fit.
pub fn tail_decay_rate(series: &[f64], grid: &TimeGrid, limit: f64) -> Option<f64> {
    let floor = 1e-12;
    let idx: Vec<usize> = (0..series.len())
        .filter(|&n| (series[n] - limit).abs() > floor)
        .collect();
    if idx.len() < 16 {
        return None;
    }
    let tail = &idx[idx.len() / 2..];
    if tail.len() < 8 {
        return None;
    }
    let xs: Vec<f64> = tail.iter().map(|&n| grid.t(n)).collect();
    let ys: Vec<f64> = tail.iter().map(|&n| (series[n] - limit).abs().ln()).collect();
    let (_, slope) = linear_fit(&xs, &ys);
    let rate = -slope;
    (rate.is_finite() && rate > 0.0).then_some(rate)
}

/// Convenience: the departure-weighted mean sojourn time of a compartment.
pub fn mean_sojourn(scalar: &ScalarKernelSet, alpha: usize) -> f64 {
    first_moment(scalar.k(alpha), scalar.grid().dt())
}

// keep the dot import alive for the tests below without a feature gate
#[allow(unused)]
fn _touch(xs: &[f64]) -> f64 {
    dot(xs, xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{compute_kernels, reduce_one_entrance};
    use crate::network::{detect_detailed_balance, ReactionNetwork};
    use approx::assert_relative_eq;
    use std::collections::BTreeMap;

    fn scalar_from_pairs(
        grid: TimeGrid,
        m: usize,
        pairs: Vec<((usize, usize), Vec<f64>)>,
    ) -> ScalarKernelSet {
        let labels = (0..m).map(|i| i.to_string()).collect();
        let phi: BTreeMap<_, _> = pairs.into_iter().collect();
        ScalarKernelSet::from_parts(grid, labels, phi, None, None, None, None).unwrap()
    }

    #[test]
    fn transfer_matrix_of_unit_exponentials_at_z_one() {
        let grid = TimeGrid::new(40.0, 1e-3).unwrap();
        let e = grid.sample(|t| (-t).exp());
        let scalar = scalar_from_pairs(grid, 2, vec![((0, 1), e.clone()), ((1, 0), e)]);
        let m = laplace_transfer_matrix(&scalar, 1.0);
        assert_relative_eq!(m[(0, 1)], 0.5, epsilon = 1e-6);
        assert_relative_eq!(m[(1, 0)], 0.5, epsilon = 1e-6);
        assert_eq!(m[(0, 0)], 0.0);
    }

    #[test]
    fn exponential_kernels_are_accepted_with_recovered_generator() {
        let grid = TimeGrid::new(20.0, 1e-3).unwrap();
        let phi01 = grid.sample(|t| 0.7 * (-0.7f64 * t).exp());
        let phi10 = grid.sample(|t| 0.3 * (-0.3f64 * t).exp());
        let scalar = scalar_from_pairs(grid, 2, vec![((0, 1), phi01), ((1, 0), phi10)]);
        let verdict = markovianity_test(&scalar, 1e-6).unwrap();
        assert!(verdict.accepted, "evidence: {:?}", verdict.evidence);
        let g = verdict.generator.unwrap();
        assert_relative_eq!(g[(1, 0)], 0.7, epsilon = 1e-9);
        assert_relative_eq!(g[(0, 1)], 0.3, epsilon = 1e-9);
        assert_relative_eq!(g[(0, 0)], -0.7, epsilon = 1e-9);
        assert_relative_eq!(verdict.rates[0], 0.7, epsilon = 1e-9);
    }

    #[test]
    fn two_stage_kernel_is_rejected_at_zero_lag() {
        let grid = TimeGrid::new(20.0, 1e-3).unwrap();
        let erlang = grid.sample(|t| t * (-t).exp());
        let e = grid.sample(|t| (-t).exp());
        let scalar = scalar_from_pairs(grid, 2, vec![((0, 1), erlang), ((1, 0), e)]);
        let verdict = markovianity_test(&scalar, 1e-6).unwrap();
        assert!(!verdict.accepted);
        assert!(verdict.generator.is_none());
        assert!(
            verdict.evidence.iter().any(|e| e.contains("zero lag")),
            "evidence: {:?}",
            verdict.evidence
        );
    }

    #[test]
    fn perron_vectors_of_a_small_column_stochastic_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 0.3, 1.0, 0.7]);
        let pv = perron(&m, 1e-10).unwrap();
        assert_relative_eq!(pv.v[0], 3.0 / 13.0, epsilon = 1e-12);
        assert_relative_eq!(pv.v[1], 10.0 / 13.0, epsilon = 1e-12);
        assert_relative_eq!(pv.u[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(pv.u[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn reducible_matrix_is_refused() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 0.5]);
        assert!(perron(&m, 1e-10).is_err());
    }

    #[test]
    fn exchange_pair_limits_match_the_closed_form() {
        // two compartments exchanging with unit-rate exponential kernels and
        // all mass initially in compartment 1: B_0(t) = 1/2 + 1/2 e^{-2t},
        // so c0 = 1 and both contents settle at 1/2
        let grid = TimeGrid::new(40.0, 1e-3).unwrap();
        let e = grid.sample(|t| (-t).exp());
        let mut scalar =
            scalar_from_pairs(grid, 2, vec![((0, 1), e.clone()), ((1, 0), e.clone())]);
        let b0 = vec![e, vec![0.0; grid.len()]];
        let d0_1 = grid.sample(|t| (-t).exp());
        let d0 = vec![vec![0.0; grid.len()], d0_1];
        scalar.set_scalar_forcing(b0, d0, vec![0.0, 1.0]).unwrap();
        let asy = long_time_limits(&scalar, 1e-6).unwrap();
        assert_relative_eq!(asy.c0, 1.0, epsilon = 1e-4);
        assert_relative_eq!(asy.n_inf[0], 0.5, epsilon = 1e-4);
        assert_relative_eq!(asy.n_inf[1], 0.5, epsilon = 1e-4);
        assert_relative_eq!(asy.v[0], 0.5, epsilon = 1e-8);
    }

    #[test]
    fn leaky_kernels_refuse_a_stationary_cycle() {
        let grid = TimeGrid::new(40.0, 1e-3).unwrap();
        let e = grid.sample(|t| 0.5 * (-t).exp());
        let mut scalar = scalar_from_pairs(grid, 2, vec![((0, 1), e.clone()), ((1, 0), e)]);
        scalar
            .set_scalar_forcing(
                vec![grid.sample(|t| (-t).exp()), vec![0.0; grid.len()]],
                vec![vec![0.0; grid.len()], vec![0.0; grid.len()]],
                vec![0.0, 1.0],
            )
            .unwrap();
        let err = long_time_limits(&scalar, 1e-6).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn monotonicity_probe_separates_exponential_from_two_stage() {
        let grid = TimeGrid::new(10.0, 1e-3).unwrap();
        let pure = grid.sample(|t| 1.3 * (-0.8 * t).exp());
        let report = complete_monotonicity_check(&pure, grid.dt(), 4, 1e-9);
        assert!(report.consistent);
        let humped = grid.sample(|t| t * (-t).exp());
        let report = complete_monotonicity_check(&humped, grid.dt(), 4, 1e-9);
        assert!(!report.consistent);
        let (order, _) = report.first_violation.unwrap();
        assert_eq!(order, 1);
    }

    #[test]
    fn mixture_fit_recovers_a_true_mixture_and_fails_on_a_hump() {
        let grid = TimeGrid::new(20.0, 1e-3).unwrap();
        let data = grid.sample(|t| 0.3 * (-0.5 * t).exp() + 0.7 * (-2.0 * t).exp());
        let fit = nonneg_mixture_fit_with_rates(&data, grid.dt(), &[0.5, 1.0, 2.0]);
        assert!(fit.sup_residual < 1e-10, "residual {}", fit.sup_residual);
        assert_relative_eq!(fit.weights[0], 0.3, epsilon = 1e-8);
        assert_relative_eq!(fit.weights[2], 0.7, epsilon = 1e-8);

        let hump = grid.sample(|t| t * (-t).exp());
        let fit = nonneg_mixture_fit(&hump, grid.dt(), 48);
        assert!(
            fit.sup_residual > 0.05,
            "a nonnegative mixture cannot follow a humped kernel, residual {}",
            fit.sup_residual
        );
    }

    #[test]
    fn spectral_kernel_matches_the_propagator_route() {
        // reversible 4-state chain 0-1-2-3 split as {0,1} | {2,3};
        // departures toward the partner compartment leave from the entrance
        let mu = [1.0f64, 4.0, 2.25, 0.25];
        let s = [(0usize, 1usize, 0.8), (1, 2, 0.5), (2, 3, 1.2)];
        let mut entries = Vec::new();
        for &(i, j, sij) in &s {
            // A[(j, i)] = S_ji sqrt(mu_j / mu_i) is the rate i -> j
            entries.push(crate::network::RateEntry {
                from: i.to_string(),
                to: j.to_string(),
                rate: sij * (mu[j] / mu[i]).sqrt(),
            });
            entries.push(crate::network::RateEntry {
                from: j.to_string(),
                to: i.to_string(),
                rate: sij * (mu[i] / mu[j]).sqrt(),
            });
        }
        let states: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let network = ReactionNetwork::new(states, &entries).unwrap();
        let cert = detect_detailed_balance(&network, 1e-10).unwrap();
        assert!(cert.is_certified());
        let system = CompartmentSystem::new(network, vec![vec![0, 1], vec![2, 3]]).unwrap();

        let spectral = detailed_balance_kernel(&system, &cert, 0, 1).unwrap();
        assert!(spectral.min_weight() >= -1e-12);
        assert_relative_eq!(spectral.weight_sum(), 1.0, epsilon = 1e-10);

        let grid = TimeGrid::new(8.0, 1e-3).unwrap();
        let kernels = compute_kernels(&system, &grid).unwrap();
        let scalar = reduce_one_entrance(&kernels, &system).unwrap();
        let numeric = scalar.phi(0, 1).unwrap();
        let analytic = spectral.sample(&grid);
        let dev = crate::numeric::max_abs_diff(numeric, &analytic);
        assert!(dev < 1e-8, "spectral vs propagator deviation {dev}");
    }

    #[test]
    fn tail_rate_of_a_relaxing_series() {
        let grid = TimeGrid::new(12.0, 1e-3).unwrap();
        let series = grid.sample(|t| 0.5 + 0.5 * (-2.0 * t).exp());
        let rate = tail_decay_rate(&series, &grid, 0.5).unwrap();
        assert_relative_eq!(rate, 2.0, epsilon = 1e-3);
    }
}
