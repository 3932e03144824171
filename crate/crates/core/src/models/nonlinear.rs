//! Nonlinear polymerization with delayed monomer incorporation: binding of a
//! monomer to an `l`-mer creates a transient complex that matures into an
//! `(l+1)`-mer only after a completion delay drawn from the density `Psi`,
//! so the incorporation flux is the memory term
//! `I_l(t) = int Psi(t - s) n_1(s) n_{l-1}(s) ds`.
//! Fragmentation `l -> (l-1) + 1` proceeds at unit rate. With `Psi` sharp
//! this reduces to a classical instantaneous-aggregation system, which this
//! module also integrates as a reference.
//!
//! Mass bookkeeping: with source `S`,
//! `S = d/dt ( sum_l l n_l + sum_l l w_l )` exactly, where `w_l` counts
//! complexes maturing toward length `l`.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::numeric::{conv_full_rev, reversed, trapezoid};

/// Length-resolved counts over time. `n(1)` are free monomers.
#[derive(Debug, Clone)]
pub struct AggregationSolution {
    grid: TimeGrid,
    n: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
}

impl AggregationSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn max_len(&self) -> usize {
        self.n.len()
    }

    /// Count series at length `l >= 1`.
    pub fn n(&self, l: usize) -> &[f64] {
        &self.n[l - 1]
    }

    /// Transient complexes maturing toward length `l >= 2`.
    pub fn w(&self, l: usize) -> &[f64] {
        &self.w[l - 2]
    }

    /// Total monomer mass `sum_l l n_l + sum_l l w_l` over time.
    pub fn mass_series(&self) -> Vec<f64> {
        let len = self.grid.len();
        let mut out = vec![0.0; len];
        for (i, series) in self.n.iter().enumerate() {
            let l = (i + 1) as f64;
            for (node, v) in series.iter().enumerate() {
                out[node] += l * v;
            }
        }
        for (i, series) in self.w.iter().enumerate() {
            let l = (i + 2) as f64;
            for (node, v) in series.iter().enumerate() {
                out[node] += l * v;
            }
        }
        out
    }
}

struct Rhs<'a> {
    max_len: usize,
    source: &'a [f64],
}

impl Rhs<'_> {
    /// Time derivative of `(n_1..n_L, w_2..w_L)` given the incorporation
    /// fluxes `flux[l-2] = I_l`. The transients `w` relax at the pace set
    /// by the fluxes alone, so their current values do not enter.
    fn eval(&self, node: usize, n: &[f64], flux: &[f64], out: &mut [f64]) {
        let l_max = self.max_len;
        // monomers: source, fragment releases, binding losses
        let mut dn1 = self.source[node] + 2.0 * n[1];
        for l in 3..=l_max {
            dn1 += n[l - 1];
        }
        for l in 2..l_max {
            dn1 -= n[0] * n[l - 1];
        }
        dn1 -= 2.0 * n[0] * n[0];
        out[0] = dn1;
        for l in 2..=l_max {
            let gain_frag = if l < l_max { n[l] } else { 0.0 };
            let loss_bind = if l < l_max { n[0] * n[l - 1] } else { 0.0 };
            out[l - 1] = flux[l - 2] + gain_frag - n[l - 1] - loss_bind;
        }
        for l in 2..=l_max {
            let p = if l == 2 { n[0] * n[0] } else { n[0] * n[l - 2] };
            out[l_max + l - 2] = p - flux[l - 2];
        }
    }
}

fn binding_products(n: &[f64], max_len: usize, out: &mut [f64]) {
    for l in 2..=max_len {
        out[l - 2] = if l == 2 { n[0] * n[0] } else { n[0] * n[l - 2] };
    }
}

/// Integrate the delayed-incorporation system with a Heun
/// predictor-corrector; the memory fluxes are product-trapezoid
/// convolutions against the stored binding history.
pub fn solve_delayed_aggregation(
    psi: &[f64],
    grid: &TimeGrid,
    source: &[f64],
    max_len: usize,
) -> Result<AggregationSolution> {
    if psi.len() != grid.len() || source.len() != grid.len() {
        return Err(Error::InvalidGrid(
            "completion density and source must be sampled on the solve grid".into(),
        ));
    }
    if max_len < 3 {
        return Err(Error::InvalidInput("need max_len >= 3".into()));
    }
    let mass = trapezoid(psi, grid.dt());
    if (mass - 1.0).abs() > 2e-2 {
        return Err(Error::InvalidInput(format!(
            "completion density has mass {mass:.4}; every binding must \
             eventually complete (mass 1 within 2e-2)"
        )));
    }
    let rev_psi = reversed(psi);
    let len = grid.len();
    let dt = grid.dt();
    let dim = 2 * max_len - 1;
    let rhs = Rhs { max_len, source };

    let mut n = vec![vec![0.0; len]; max_len];
    let mut w = vec![vec![0.0; len]; max_len - 1];
    // binding history per target length, extended as the march proceeds
    let mut products = vec![vec![0.0; len]; max_len - 1];

    let mut state = vec![0.0f64; dim];
    let mut flux = vec![0.0f64; max_len - 1];
    let mut flux_pred = vec![0.0f64; max_len - 1];
    let mut deriv = vec![0.0f64; dim];
    let mut deriv_pred = vec![0.0f64; dim];
    let mut predicted = vec![0.0f64; dim];

    let mut prods_now = vec![0.0f64; max_len - 1];
    binding_products(&state[..max_len], max_len, &mut prods_now);
    for (series, &v) in products.iter_mut().zip(&prods_now) {
        series[0] = v;
    }

    for node in 0..grid.steps() {
        for l in 0..max_len - 1 {
            flux[l] = conv_full_rev(&rev_psi, &products[l], node, dt);
        }
        rhs.eval(node, &state[..max_len], &flux, &mut deriv);
        for i in 0..dim {
            predicted[i] = state[i] + dt * deriv[i];
        }
        binding_products(&predicted[..max_len], max_len, &mut prods_now);
        for (series, &v) in products.iter_mut().zip(&prods_now) {
            series[node + 1] = v;
        }
        for l in 0..max_len - 1 {
            flux_pred[l] = conv_full_rev(&rev_psi, &products[l], node + 1, dt);
        }
        rhs.eval(node + 1, &predicted[..max_len], &flux_pred, &mut deriv_pred);
        for i in 0..dim {
            state[i] += 0.5 * dt * (deriv[i] + deriv_pred[i]);
        }
        binding_products(&state[..max_len], max_len, &mut prods_now);
        for (series, &v) in products.iter_mut().zip(&prods_now) {
            series[node + 1] = v;
        }
        for l in 0..max_len {
            n[l][node + 1] = state[l];
        }
        for l in 0..max_len - 1 {
            w[l][node + 1] = state[max_len + l];
        }
    }
    Ok(AggregationSolution { grid: *grid, n, w })
}

/// Instantaneous-incorporation reference: the same network with
/// `I_l = n_1 n_{l-1}` directly (no transient states).
pub fn instantaneous_reference(
    grid: &TimeGrid,
    source: &[f64],
    max_len: usize,
) -> Result<AggregationSolution> {
    if source.len() != grid.len() {
        return Err(Error::InvalidGrid(
            "source must be sampled on the solve grid".into(),
        ));
    }
    if max_len < 3 {
        return Err(Error::InvalidInput("need max_len >= 3".into()));
    }
    let len = grid.len();
    let dt = grid.dt();
    let dim = 2 * max_len - 1;
    let rhs = Rhs { max_len, source };
    let mut n = vec![vec![0.0; len]; max_len];
    let w = vec![vec![0.0; len]; max_len - 1];
    let mut state = vec![0.0f64; dim];
    let mut flux = vec![0.0f64; max_len - 1];
    let mut deriv = vec![0.0f64; dim];
    let mut deriv_pred = vec![0.0f64; dim];
    let mut predicted = vec![0.0f64; dim];

    for node in 0..grid.steps() {
        binding_products(&state[..max_len], max_len, &mut flux);
        rhs.eval(node, &state[..max_len], &flux, &mut deriv);
        for i in 0..dim {
            predicted[i] = state[i] + dt * deriv[i];
        }
        binding_products(&predicted[..max_len], max_len, &mut flux);
        rhs.eval(node + 1, &predicted[..max_len], &flux, &mut deriv_pred);
        for i in 0..dim {
            state[i] += 0.5 * dt * (deriv[i] + deriv_pred[i]);
        }
        // instantaneous completion: transient states cannot accumulate
        for i in max_len..dim {
            state[i] = 0.0;
        }
        for l in 0..max_len {
            n[l][node + 1] = state[l];
        }
    }
    Ok(AggregationSolution { grid: *grid, n, w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::max_abs_diff;

    fn erlang2(grid: &TimeGrid, rate: f64) -> Vec<f64> {
        grid.sample(|t| rate * rate * t * (-rate * t).exp())
    }

    #[test]
    fn source_mass_is_conserved_through_the_memory_terms() {
        let grid = TimeGrid::new(8.0, 5e-3).unwrap();
        let psi = erlang2(&grid, 4.0);
        let source = vec![1.0; grid.len()];
        let sol = solve_delayed_aggregation(&psi, &grid, &source, 10).unwrap();
        let mass = sol.mass_series();
        let last = grid.len() - 1;
        let drift = (mass[last] - mass[0] - grid.t_max()).abs();
        assert!(drift < 0.01, "mass drift {drift}");
        // transient complexes really hold mass mid-run
        let mid = grid.node_of(1.0).unwrap();
        assert!(sol.w(2)[mid] > 1e-4);
    }

    #[test]
    fn sharp_completion_approaches_the_instantaneous_limit() {
        let grid = TimeGrid::new(6.0, 2.5e-3).unwrap();
        let rate = 50.0;
        let psi = grid.sample(|t| rate * (-rate * t).exp());
        let source = vec![1.0; grid.len()];
        let delayed = solve_delayed_aggregation(&psi, &grid, &source, 10).unwrap();
        let instant = instantaneous_reference(&grid, &source, 10).unwrap();
        let mut worst = 0.0f64;
        for l in 1..=6 {
            worst = worst.max(max_abs_diff(delayed.n(l), instant.n(l)));
        }
        assert!(
            worst < 2.5 / rate,
            "sharp-completion deviation {worst} exceeds ~2/rate"
        );
    }

    #[test]
    fn instantaneous_reference_keeps_no_transients_and_conserves_mass() {
        let grid = TimeGrid::new(6.0, 5e-3).unwrap();
        let source = vec![0.5; grid.len()];
        let sol = instantaneous_reference(&grid, &source, 8).unwrap();
        assert!(sol.w(3).iter().all(|&v| v == 0.0));
        let mass = sol.mass_series();
        let last = grid.len() - 1;
        let drift = (mass[last] - 0.5 * grid.t_max()).abs();
        assert!(drift < 0.01, "mass drift {drift}");
    }

    #[test]
    fn unnormalized_completion_density_is_rejected() {
        let grid = TimeGrid::new(4.0, 5e-3).unwrap();
        let psi = grid.sample(|t| 0.3 * (-t).exp());
        let source = vec![1.0; grid.len()];
        assert!(solve_delayed_aggregation(&psi, &grid, &source, 6).is_err());
    }
}
