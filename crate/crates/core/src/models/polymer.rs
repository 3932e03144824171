//! Linear polymerization with a non-exponential elongation step: each
//! monomer addition passes through a proofreading cascade summarized by a
//! response density `Psi`, so the flux of polymers from length `l - 1` to
//! `l` is `I_l = Psi * I_{l-1}` with a constant monomer influx `I_1 = 1`.
//!
//! Lengths fill up behind a front that advances at speed `1 / mean(Psi)`;
//! behind the front every length settles at the plateau `mean(Psi)`.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::numeric::{convolve, cumulative_trapezoid, first_moment, linear_fit, trapezoid};

/// Length distribution over time under constant monomer influx.
#[derive(Debug, Clone)]
pub struct FrontSolution {
    grid: TimeGrid,
    /// `n[l - 1]` is the series of counts at length `l`, `l = 1..=max_len`.
    lengths: Vec<Vec<f64>>,
    /// mean of the elongation density: plateau value and inverse speed
    mean_step: f64,
    front: Vec<usize>,
    warnings: Vec<String>,
}

impl FrontSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn max_len(&self) -> usize {
        self.lengths.len()
    }

    /// Count series for length `l >= 1`.
    pub fn n(&self, l: usize) -> &[f64] {
        &self.lengths[l - 1]
    }

    /// Plateau value reached behind the front (the mean elongation time).
    pub fn plateau(&self) -> f64 {
        self.mean_step
    }

    /// Front position over time: the largest length whose count has reached
    /// half the plateau.
    pub fn front_position(&self) -> &[usize] {
        &self.front
    }

    /// Front speed from a straight-line fit over the second half of the run.
    /// `None` when the front never moves.
    pub fn front_speed(&self) -> Option<f64> {
        let len = self.grid.len();
        let from = len / 2;
        let xs: Vec<f64> = (from..len).map(|n| self.grid.t(n)).collect();
        let ys: Vec<f64> = (from..len).map(|n| self.front[n] as f64).collect();
        if ys.last() == Some(&0.0) {
            return None;
        }
        let (_, slope) = linear_fit(&xs, &ys);
        (slope.is_finite() && slope > 0.0).then_some(slope)
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

/// March the renewal chain `I_l = Psi * I_{l-1}` from `I_1 = 1` and
/// accumulate `n_l = int (I_l - I_{l+1})`.
///
/// `psi` must be sampled on `grid` with mass within 1e-3 of one (each
/// elongation eventually completes); its mean sets the front speed.
pub fn polymer_front(psi: &[f64], grid: &TimeGrid, max_len: usize) -> Result<FrontSolution> {
    if psi.len() != grid.len() {
        return Err(Error::InvalidGrid(format!(
            "elongation density has {} samples, grid has {}",
            psi.len(),
            grid.len()
        )));
    }
    if psi.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::InvalidInput(
            "elongation density must be nonnegative and finite".into(),
        ));
    }
    let mass = trapezoid(psi, grid.dt());
    if (mass - 1.0).abs() > 1e-3 {
        return Err(Error::InvalidInput(format!(
            "elongation density has mass {mass:.6}; it must be 1 within 1e-3 \
             (extend the grid or rescale)"
        )));
    }
    let mean_step = first_moment(psi, grid.dt());
    if mean_step <= 0.0 {
        return Err(Error::InvalidInput(
            "elongation density has nonpositive mean".into(),
        ));
    }
    if max_len < 2 {
        return Err(Error::InvalidInput("need max_len >= 2".into()));
    }

    let len = grid.len();
    let dt = grid.dt();
    let mut lengths = Vec::with_capacity(max_len);
    let mut flux_prev = vec![1.0; len]; // I_1
    for _l in 1..=max_len {
        let flux_next = convolve(psi, &flux_prev, dt);
        let net: Vec<f64> = flux_prev
            .iter()
            .zip(&flux_next)
            .map(|(a, b)| a - b)
            .collect();
        lengths.push(cumulative_trapezoid(&net, dt));
        flux_prev = flux_next;
    }

    let half = 0.5 * mean_step;
    let front: Vec<usize> = (0..len)
        .map(|n| {
            (1..=max_len)
                .rev()
                .find(|&l| lengths[l - 1][n] >= half)
                .unwrap_or(0)
        })
        .collect();

    let mut warnings = Vec::new();
    if front[len - 1] >= max_len {
        warnings.push(format!(
            "front reached the length cutoff {max_len}; counts there are truncated"
        ));
    }
    Ok(FrontSolution {
        grid: *grid,
        lengths,
        mean_step,
        front,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_stage_elongation_gives_gamma_tail_counts() {
        // Psi = e^-t: n_l(t) = P(Gamma(l, 1) <= t), plateau 1
        let grid = TimeGrid::new(30.0, 0.02).unwrap();
        let psi = grid.sample(|t| (-t).exp());
        let sol = polymer_front(&psi, &grid, 40).unwrap();
        let n3 = sol.n(3);
        let mut worst = 0.0f64;
        for n in (0..grid.len()).step_by(100) {
            let t = grid.t(n);
            let exact = 1.0 - (-t).exp() * (1.0 + t + 0.5 * t * t);
            worst = worst.max((n3[n] - exact).abs());
        }
        assert!(worst < 1e-3, "worst deviation {worst}");
        // plateau carries the kernel's trapezoid mass bias ~dt^2/12
        assert_relative_eq!(sol.plateau(), 1.0, epsilon = 1e-4);
    }

    #[test]
    fn front_advances_at_inverse_mean_speed() {
        let grid = TimeGrid::new(60.0, 0.05).unwrap();
        let psi = grid.sample(|t| (-t).exp());
        let sol = polymer_front(&psi, &grid, 90).unwrap();
        let speed = sol.front_speed().unwrap();
        assert!(
            (speed - 1.0).abs() < 0.05,
            "front speed {speed} should be within 5% of 1"
        );
        assert!(sol.warnings().is_empty());
        // well behind the front the counts sit at the plateau
        let last = grid.len() - 1;
        assert_relative_eq!(sol.n(5)[last], 1.0, epsilon = 0.05);
    }

    #[test]
    fn two_stage_elongation_with_unit_mean_keeps_the_speed() {
        // Erlang-2 at rate 2 has mean 1: same front speed as the single stage
        let grid = TimeGrid::new(60.0, 0.05).unwrap();
        let psi = grid.sample(|t| 4.0 * t * (-2.0 * t).exp());
        let sol = polymer_front(&psi, &grid, 90).unwrap();
        assert_relative_eq!(sol.plateau(), 1.0, epsilon = 1e-4);
        let speed = sol.front_speed().unwrap();
        assert!((speed - 1.0).abs() < 0.05, "speed {speed}");
    }

    #[test]
    fn unnormalized_density_is_rejected() {
        let grid = TimeGrid::new(30.0, 0.02).unwrap();
        let psi = grid.sample(|t| 0.5 * (-t).exp());
        assert!(polymer_front(&psi, &grid, 10).is_err());
    }
}
