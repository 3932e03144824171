use crate::error::{Error, Result};

/// Uniform time grid on `[0, t_max]` with `steps + 1` nodes.
///
/// All solvers in this crate march on uniform grids; convolution quadrature
/// and the age-structured transport step both rely on the spacing being
/// constant. `t_max` must be an (near-exact) integer multiple of `dt` and at
/// least `10·dt`, so that a run always resolves its own horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_max: f64, dt: f64) -> Result<Self> {
        if !dt.is_finite() || dt <= 0.0 {
            return Err(Error::InvalidGrid(format!("dt must be positive, got {dt}")));
        }
        if !t_max.is_finite() || t_max <= 0.0 {
            return Err(Error::InvalidGrid(format!(
                "t_max must be positive, got {t_max}"
            )));
        }
        let ratio = t_max / dt;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-6 {
            return Err(Error::InvalidGrid(format!(
                "t_max = {t_max} is not a multiple of dt = {dt}"
            )));
        }
        Self::from_steps(dt, steps as usize)
    }

    pub fn from_steps(dt: f64, steps: usize) -> Result<Self> {
        if !dt.is_finite() || dt <= 0.0 {
            return Err(Error::InvalidGrid(format!("dt must be positive, got {dt}")));
        }
        if steps < 10 {
            return Err(Error::InvalidGrid(format!(
                "grid must span at least 10 steps (t_max >= 10*dt), got {steps}"
            )));
        }
        Ok(TimeGrid { dt, steps })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes, `steps + 1`.
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn t_max(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(move |i| self.t(i))
    }

    /// Same span, half the spacing.
    pub fn refine_half(&self) -> TimeGrid {
        TimeGrid {
            dt: self.dt / 2.0,
            steps: self.steps * 2,
        }
    }

    /// Index of the node nearest to `t`, if it lies within round-off of one.
    pub fn node_of(&self, t: f64) -> Option<usize> {
        let r = t / self.dt;
        let k = r.round();
        if k < 0.0 || k > self.steps as f64 {
            return None;
        }
        if (r - k).abs() > 1e-6 {
            return None;
        }
        Some(k as usize)
    }

    /// Sample a function on every node.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.times().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounds_node_count_and_reports_span() {
        let g = TimeGrid::new(20.0, 1e-3).unwrap();
        assert_eq!(g.steps(), 20_000);
        assert_eq!(g.len(), 20_001);
        assert!((g.t_max() - 20.0).abs() < 1e-12);
        assert!((g.t(3) - 3e-3).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_multiple_and_short_spans() {
        assert!(TimeGrid::new(1.0, 0.3).is_err());
        assert!(TimeGrid::new(0.05, 1e-2).is_err()); // only 5 steps
        assert!(TimeGrid::new(-1.0, 1e-2).is_err());
        assert!(TimeGrid::new(1.0, 0.0).is_err());
    }

    #[test]
    fn refine_half_doubles_steps() {
        let g = TimeGrid::new(2.0, 0.1).unwrap();
        let h = g.refine_half();
        assert_eq!(h.steps(), 40);
        assert!((h.t_max() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn node_lookup_snaps_to_grid() {
        let g = TimeGrid::new(2.0, 1e-3).unwrap();
        assert_eq!(g.node_of(1.0), Some(1000));
        assert_eq!(g.node_of(0.0), Some(0));
        assert_eq!(g.node_of(1.0005), None);
        assert_eq!(g.node_of(2.5), None);
    }
}
