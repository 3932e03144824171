//! Coherent feed-forward loop: a signal drives `x`, `x` drives `y`, and the
//! output `z` is produced by the product `x y`. The input-output relation is
//! quadratic in the signal with a two-argument response kernel
//!
//! `Z(t) = int int K(t - s1, t - s2) S(s1) S(s2) ds1 ds2`,
//!
//! which captures the motif's signature: a delayed response to signal onset
//! and an immediate shutdown on signal loss (sign-sensitive delay).
//!
//! The module carries three routes to `Z`: the closed kernel evaluated via
//! separable accumulators (fast, O(n^2)), direct Runge-Kutta integration of
//! the ODEs (independent check), and the literal double quadrature of the
//! kernel (slow; used to validate the kernel expression itself).

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::numeric::{conv_full_rev, cumulative_trapezoid, reversed};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FflParams {
    /// Decay rate of `x` (signal receiver).
    pub a: f64,
    /// Decay rate of `y` (intermediate).
    pub b: f64,
    /// Decay rate of `z` (output).
    pub c: f64,
}

/// `(1 - e^{-x m}) / x`, continuous through `x = 0`.
fn em1(x: f64, m: f64) -> f64 {
    if x == 0.0 {
        m
    } else {
        -(-x * m).exp_m1() / x
    }
}

impl FflParams {
    fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0 && self.c > 0.0) {
            return Err(Error::InvalidInput(
                "feed-forward rates must be positive".into(),
            ));
        }
        if (self.b - self.a).abs() <= 1e-7 * self.a.abs().max(1.0) {
            return Err(Error::Unsupported(
                "a = b makes the cascade kernel confluent; perturb the rates".into(),
            ));
        }
        Ok(())
    }

    fn guard_horizon(&self, t_max: f64) -> Result<()> {
        let reach = [
            self.a * t_max,
            self.b * t_max,
            (self.c - 2.0 * self.a).abs() * t_max,
            (self.c - self.a - self.b).abs() * t_max,
        ];
        if reach.iter().any(|&r| r > 600.0) {
            return Err(Error::Numeric(
                "time horizon too long for the separable accumulators; \
                 the exponential weights would overflow"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Two-argument response kernel. The first argument is the age of the
    /// signal sample feeding the intermediate leg.
    pub fn kernel_at(&self, xi: f64, eta: f64) -> Result<f64> {
        self.validate()?;
        if xi < 0.0 || eta < 0.0 {
            return Ok(0.0);
        }
        let m = xi.min(eta);
        let pre = (-self.a * (xi + eta)).exp() / (self.b - self.a);
        Ok(pre
            * (em1(self.c - 2.0 * self.a, m)
                - (-(self.b - self.a) * xi).exp() * em1(self.c - self.a - self.b, m)))
    }

    /// Output through the kernel, using separable accumulators: the double
    /// integral factors through `u = S e^{at}`, `U = int u`,
    /// `ubar = S e^{bt}`, `Ubar = int ubar` into three one-dimensional
    /// convolutions per node.
    pub fn output(&self, grid: &TimeGrid, signal: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        self.guard_horizon(grid.t_max())?;
        if signal.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "signal has {} samples, grid has {}",
                signal.len(),
                grid.len()
            )));
        }
        let len = grid.len();
        let dt = grid.dt();
        let (a, b, c) = (self.a, self.b, self.c);

        let u: Vec<f64> = (0..len).map(|n| signal[n] * (a * grid.t(n)).exp()).collect();
        let ubar: Vec<f64> = (0..len).map(|n| signal[n] * (b * grid.t(n)).exp()).collect();
        let cap_u = cumulative_trapezoid(&u, dt);
        let cap_ubar = cumulative_trapezoid(&ubar, dt);

        let a_tilde: Vec<f64> = (0..len)
            .map(|n| em1(c - 2.0 * a, grid.t(n)) / (b - a))
            .collect();
        let b_tilde: Vec<f64> = (0..len)
            .map(|n| em1(c - a - b, grid.t(n)) / (b - a))
            .collect();
        let a_rev = reversed(&a_tilde);
        let b_rev = reversed(&b_tilde);

        let p: Vec<f64> = (0..len).map(|n| u[n] * cap_u[n]).collect();
        let q1: Vec<f64> = (0..len).map(|n| ubar[n] * cap_u[n]).collect();
        let q2: Vec<f64> = (0..len).map(|n| u[n] * cap_ubar[n]).collect();

        let mut out = Vec::with_capacity(len);
        for n in 0..len {
            let t = grid.t(n);
            let sym = 2.0 * conv_full_rev(&a_rev, &p, n, dt);
            let cross =
                conv_full_rev(&b_rev, &q1, n, dt) + conv_full_rev(&b_rev, &q2, n, dt);
            out.push((-2.0 * a * t).exp() * sym - (-(a + b) * t).exp() * cross);
        }
        Ok(out)
    }

    /// Output by fourth-order Runge-Kutta on the underlying ODEs
    /// `x' = S - a x`, `y' = x - b y`, `z' = x y - c z`.
    pub fn output_ode(&self, grid: &TimeGrid, signal: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        if signal.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "signal has {} samples, grid has {}",
                signal.len(),
                grid.len()
            )));
        }
        let dt = grid.dt();
        let (a, b, c) = (self.a, self.b, self.c);
        let f = |s: f64, v: [f64; 3]| -> [f64; 3] {
            [s - a * v[0], v[0] - b * v[1], v[0] * v[1] - c * v[2]]
        };
        let mut v = [0.0f64; 3];
        let mut out = Vec::with_capacity(grid.len());
        out.push(0.0);
        for n in 0..grid.steps() {
            let s0 = signal[n];
            let s1 = signal[n + 1];
            let sm = 0.5 * (s0 + s1);
            let k1 = f(s0, v);
            let k2 = f(sm, add(v, k1, 0.5 * dt));
            let k3 = f(sm, add(v, k2, 0.5 * dt));
            let k4 = f(s1, add(v, k3, dt));
            for i in 0..3 {
                v[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            out.push(v[2]);
        }
        Ok(out)
    }

    /// Output by literal double quadrature of the kernel. Cubic in the node
    /// count; intended for validating the kernel on coarse grids.
    pub fn output_naive(&self, grid: &TimeGrid, signal: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        if signal.len() != grid.len() {
            return Err(Error::InvalidGrid("signal/grid mismatch".into()));
        }
        let dt = grid.dt();
        let len = grid.len();
        let mut out = Vec::with_capacity(len);
        for n in 0..len {
            let t = grid.t(n);
            let mut acc = 0.0;
            for i in 0..=n {
                let wi = if i == 0 || i == n { 0.5 } else { 1.0 };
                for j in 0..=n {
                    let wj = if j == 0 || j == n { 0.5 } else { 1.0 };
                    acc += wi
                        * wj
                        * self.kernel_at(t - grid.t(i), t - grid.t(j))?
                        * signal[i]
                        * signal[j];
                }
            }
            out.push(acc * dt * dt);
        }
        Ok(out)
    }
}

fn add(v: [f64; 3], k: [f64; 3], h: f64) -> [f64; 3] {
    [v[0] + h * k[0], v[1] + h * k[1], v[2] + h * k[2]]
}

/// Fast-receiver limit of the loop on the slow time scale: the rescaled
/// output is `xi(tau) = Sbar(tau) * y(tau)` with `y' = Sbar - y`, marched
/// with an exponential integrator (exact for piecewise-constant signals).
/// Onset gives `1 - e^{-tau}`; shutdown kills the output instantly.
pub fn limit_output(grid: &TimeGrid, signal: &[f64]) -> Result<Vec<f64>> {
    if signal.len() != grid.len() {
        return Err(Error::InvalidGrid(format!(
            "signal has {} samples, grid has {}",
            signal.len(),
            grid.len()
        )));
    }
    let decay = (-grid.dt()).exp();
    let mut y = 0.0f64;
    let mut out = Vec::with_capacity(grid.len());
    out.push(signal[0] * y);
    for n in 0..grid.steps() {
        y = decay * y + (1.0 - decay) * 0.5 * (signal[n] + signal[n + 1]);
        out.push(signal[n + 1] * y);
    }
    Ok(out)
}
