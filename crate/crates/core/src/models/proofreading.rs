//! Kinetic proofreading: a substrate binds a receptor, passes through an
//! activated intermediate, and either completes into product or is discarded.
//! Discrimination between a matching and a mismatching substrate can reach
//! the square of the single-step affinity ratio because the discard pathway
//! is exercised twice.
//!
//! Species: `C` (free substrate at the receptor), `S` (bound complex),
//! `S*` (activated complex). Product formation `S* -> P` at rate `lambda`
//! and degradation `C -> 0` at rate `mu` make the 3x3 generator lossy, so
//! this module works with the raw matrix rather than a conservative network.

use crate::error::{Error, Result};
use crate::expm::expm;
use crate::grid::TimeGrid;
use nalgebra::{DMatrix, DVector};

/// Rate constants, with the affinities expressed as the exponential factors
/// `xi = exp(E1)` (unbinding amplification of `S -> C`) and
/// `eta = exp(E2 - E1)` (activation energy gap).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProofreadingParams {
    /// Binding rate `C -> S`.
    pub k: f64,
    /// Activation rate `S -> S*`.
    pub alpha: f64,
    /// Direct activation rate `C -> S*`.
    pub beta: f64,
    /// Irreversibility factor of the activation step (`q = 1` restores
    /// detailed balance; large `q` burns energy).
    pub q: f64,
    /// Production rate `S* -> P`.
    pub lambda: f64,
    /// Degradation rate `C -> 0`.
    pub mu: f64,
    /// `exp(E1)`: discard amplification for the bound complex.
    pub xi: f64,
    /// `exp(E2 - E1)`: shared activation gap (equal for all substrates).
    pub eta: f64,
}

impl ProofreadingParams {
    /// The strongly-driven discrimination example: `eps = 0.01`,
    /// `alpha = mu = eps`, `beta = eps^2`, `q = eps^-2`, `lambda = 2 eps^2`,
    /// affinity factors 2 (matching) and 8 (mismatching), shared gap 20.
    pub fn discrimination_example(mismatching: bool) -> Self {
        let eps = 0.01;
        ProofreadingParams {
            k: 1.0,
            alpha: eps,
            beta: eps * eps,
            q: 1.0 / (eps * eps),
            lambda: 2.0 * eps * eps,
            mu: eps,
            xi: if mismatching { 8.0 } else { 2.0 },
            eta: 20.0,
        }
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    fn validate(&self) -> Result<()> {
        let vals = [
            self.k, self.alpha, self.beta, self.q, self.lambda, self.mu, self.xi, self.eta,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "proofreading rates must be nonnegative and finite".into(),
            ));
        }
        if self.k <= 0.0 || self.lambda <= 0.0 || self.q <= 0.0 {
            return Err(Error::InvalidInput(
                "binding, production and irreversibility factors must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Generator over `(C, S, S*)`. Column sums are `-mu`, `0`, `-lambda`:
    /// the deficits are the degradation and production fluxes.
    pub fn generator(&self) -> DMatrix<f64> {
        let (k, a, b, q, l, mu) = (self.k, self.alpha, self.beta, self.q, self.lambda, self.mu);
        let (xi, eta) = (self.xi, self.eta);
        let back_s = k * xi; // S -> C
        let back_star = b * xi * eta; // S* -> C
        let rev = a * eta / q; // S* -> S
        DMatrix::from_row_slice(
            3,
            3,
            &[
                -(k + b + mu),
                back_s,
                back_star,
                k,
                -(back_s + a),
                rev,
                b,
                a,
                -(rev + back_star + l),
            ],
        )
    }

    /// Production response to a unit pulse of substrate:
    /// `Phi(t) = lambda * S*(t)` with initial state `(1, 0, 0)`.
    pub fn response(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        self.validate()?;
        let a = self.generator();
        let step = expm(&(&a * grid.dt()))?;
        let mut state = DVector::from_column_slice(&[1.0, 0.0, 0.0]);
        let mut out = Vec::with_capacity(grid.len());
        out.push(self.lambda * state[2]);
        for _ in 0..grid.steps() {
            state = &step * state;
            out.push(self.lambda * state[2]);
        }
        Ok(out)
    }

    /// Total product per unit pulse via the transform at zero:
    /// solve `-A x = e_C` and read `lambda * x_{S*}`.
    pub fn total_production_transform(&self) -> Result<f64> {
        self.validate()?;
        let a = self.generator();
        let rhs = DVector::from_column_slice(&[1.0, 0.0, 0.0]);
        let x = (-a)
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numeric("proofreading generator is singular".into()))?;
        Ok(self.lambda * x[2])
    }

    /// Total product by quadrature of the response: a fine segment resolves
    /// the fast initial transient, a coarse long segment captures the slow
    /// tail set by the smallest rates.
    pub fn total_production_quadrature(&self) -> Result<f64> {
        self.validate()?;
        self.weighted_integral(false)
    }

    /// Mean completion time `T = int t Phi / int Phi`, closed form, valid
    /// only without degradation (every pulse eventually completes, so the
    /// kernel is a probability density). Equals the summed mean residence
    /// times of the three species; the activated stage alone contributes
    /// exactly `1/lambda` since the whole unit of mass exits through it.
    pub fn mean_completion_time(&self) -> Result<f64> {
        self.validate()?;
        if self.mu != 0.0 {
            return Err(Error::InvalidInput(
                "the closed-form completion time needs mu = 0".into(),
            ));
        }
        let (k, a, b, q, l) = (self.k, self.alpha, self.beta, self.q, self.lambda);
        let (xi, eta) = (self.xi, self.eta);
        let lam_beta = l + b * eta * xi;
        let numer = lam_beta * (k * xi + a)
            + (a / q) * eta * k * xi
            + (k + b) * (a * eta / q)
            + k * lam_beta;
        let denom = l * (b * k * xi + a * k + a * b);
        if denom <= 0.0 {
            return Err(Error::Numeric(
                "completion-time denominator is not positive".into(),
            ));
        }
        Ok(numer / denom + 1.0 / l)
    }

    /// Mean completion time by quadrature of `t Phi(t)` (mu must be 0 so the
    /// kernel has unit mass).
    pub fn mean_completion_time_quadrature(&self) -> Result<f64> {
        self.validate()?;
        if self.mu != 0.0 {
            return Err(Error::InvalidInput(
                "the completion time needs mu = 0".into(),
            ));
        }
        self.weighted_integral(true)
    }

    /// `int Phi` or `int t Phi` over a two-segment grid sized from the
    /// slowest decay rate of the generator.
    fn weighted_integral(&self, first_moment: bool) -> Result<f64> {
        let a = self.generator();
        let slowest = a
            .complex_eigenvalues()
            .iter()
            .map(|z| -z.re)
            .filter(|&r| r > 1e-14)
            .fold(f64::INFINITY, f64::min);
        if !slowest.is_finite() || slowest <= 0.0 {
            return Err(Error::Numeric(
                "generator has no decaying mode; the integral diverges".into(),
            ));
        }
        // 40 lifetimes of the slowest mode, resolved coarsely after t = 20
        let t_break = 20.0f64.min(40.0 / slowest);
        let t_end = (40.0 / slowest).max(t_break * 2.0);
        let mut total = 0.0;
        let mut state = DVector::from_column_slice(&[1.0, 0.0, 0.0]);
        let mut t = 0.0;
        for (start, stop, dt) in [(0.0, t_break, 1e-3), (t_break, t_end, 0.5)] {
            let n = ((stop - start) / dt).round() as usize;
            if n == 0 {
                continue;
            }
            let step = expm(&(&a * dt))?;
            let mut prev = self.lambda * state[2] * if first_moment { t } else { 1.0 };
            for _ in 0..n {
                state = &step * state;
                t += dt;
                let cur = self.lambda * state[2] * if first_moment { t } else { 1.0 };
                total += 0.5 * dt * (prev + cur);
                prev = cur;
            }
        }
        Ok(total)
    }
}

/// Production ratio mismatching / matching, the discrimination figure of
/// merit. Bounded below by `theta^2 = (xi / xi_bar)^2`; proofreading
/// approaches that bound when activation is slow and strongly driven.
pub fn discrimination_ratio(
    matching: &ProofreadingParams,
    mismatching: &ProofreadingParams,
) -> Result<f64> {
    if (matching.eta - mismatching.eta).abs() > 1e-12 * matching.eta.abs().max(1.0) {
        return Err(Error::InvalidInput(
            "the activation gap eta must be shared between substrates".into(),
        ));
    }
    let p_match = matching.total_production_transform()?;
    let p_mis = mismatching.total_production_transform()?;
    if p_match <= 0.0 {
        return Err(Error::Numeric("matching substrate yields no product".into()));
    }
    Ok(p_mis / p_match)
}

/// The square of the affinity ratio: the best discrimination the two-step
/// discard mechanism can deliver.
pub fn optimal_discrimination(matching: &ProofreadingParams, mismatching: &ProofreadingParams) -> f64 {
    let theta = matching.xi / mismatching.xi;
    theta * theta
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn generator_columns_lose_exactly_mu_and_lambda() {
        let p = ProofreadingParams::discrimination_example(false);
        let a = p.generator();
        let col = |j: usize| (0..3).map(|i| a[(i, j)]).sum::<f64>();
        assert_relative_eq!(col(0), -p.mu, epsilon = 1e-15);
        assert_relative_eq!(col(1), 0.0, epsilon = 1e-15);
        assert_relative_eq!(col(2), -p.lambda, epsilon = 1e-15);
    }

    #[test]
    fn response_starts_at_zero_and_is_nonnegative() {
        let p = ProofreadingParams::discrimination_example(false);
        let grid = TimeGrid::new(50.0, 0.01).unwrap();
        let phi = p.response(&grid).unwrap();
        assert_eq!(phi[0], 0.0);
        assert!(phi.iter().all(|&v| v >= 0.0));
        assert!(phi.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn transform_and_quadrature_agree_on_total_production() {
        let p = ProofreadingParams::discrimination_example(false);
        let exact = p.total_production_transform().unwrap();
        let quad = p.total_production_quadrature().unwrap();
        assert_relative_eq!(quad, exact, max_relative = 1e-6);
    }

    #[test]
    fn strongly_driven_example_discriminates_near_the_square_bound() {
        let matching = ProofreadingParams::discrimination_example(false);
        let mismatching = ProofreadingParams::discrimination_example(true);
        let ratio = discrimination_ratio(&matching, &mismatching).unwrap();
        let theta2 = optimal_discrimination(&matching, &mismatching);
        assert_relative_eq!(theta2, 0.0625, epsilon = 1e-15);
        assert!(ratio >= theta2, "ratio {ratio} fell below the bound {theta2}");
        assert!(
            (ratio - theta2).abs() / theta2 < 0.15,
            "ratio {ratio} is not within 15% of {theta2}"
        );
        // quadratic discrimination costs yield: only ~2.5% of pulses complete
        let p_inf = matching.total_production_transform().unwrap();
        assert!(
            (p_inf - 0.025).abs() / 0.025 < 0.15,
            "total production {p_inf} is not within 15% of 0.025"
        );
    }

    #[test]
    fn closed_form_completion_time_matches_quadrature() {
        let p = ProofreadingParams::discrimination_example(false).with_mu(0.0);
        let closed = p.mean_completion_time().unwrap();
        let quad = p.mean_completion_time_quadrature().unwrap();
        assert_relative_eq!(quad, closed, max_relative = 1e-4);
        assert!(p.with_mu(0.01).mean_completion_time().is_err());
    }

    #[test]
    fn completion_times_discriminate_like_production() {
        // without degradation everything completes; the matching substrate is
        // simply much faster. The square law needs xi >> 1 with slow, strongly
        // driven activation (the figure parameters sit outside that regime).
        let matching = ProofreadingParams {
            k: 1.0,
            alpha: 1e-3,
            beta: 1e-9,
            q: 1e6,
            lambda: 1e-8,
            mu: 0.0,
            xi: 100.0,
            eta: 1e4,
        };
        let mismatching = ProofreadingParams { xi: 400.0, ..matching };
        let t = matching.mean_completion_time().unwrap();
        let t_bar = mismatching.mean_completion_time().unwrap();
        let theta2 = optimal_discrimination(&matching, &mismatching);
        let ratio = t / t_bar;
        assert!(
            (ratio - theta2).abs() / theta2 < 0.05,
            "time ratio {ratio} vs bound {theta2}"
        );
    }
}
