//! Response kernels of a compartmentalized network.
//!
//! For a decomposition with diagonal blocks `A_aa` and coupling blocks
//! `A_ab`, the pair kernel from compartment `b` into compartment `a` is
//! `G_{b->a}(t) = A_ab · e^{t A_bb}` and the departure kernel of `a` is
//! `K_a(t) = C_a · e^{t A_aa}` with `C_a` the diagonal matrix of exit rates.
//! Kernels are sampled on a uniform grid by stepping the block propagator
//! with one matrix exponential per block.
//!
//! When every compartment receives inflow at a single entrance state, the
//! matrix kernels collapse to scalars `Phi_{a->b}(t)` (transfer density) and
//! `k_a(t)` (total departure density), the representation used by the scalar
//! renewal solver and the age-structured solver.

use crate::error::{Error, Result};
use crate::expm::{expm, ExpmAction};
use crate::grid::TimeGrid;
use crate::network::CompartmentSystem;
use crate::numeric::trapezoid;
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

/// Time series of a matrix-valued function, component-major: the samples of
/// entry `(i, j)` are contiguous in memory.
#[derive(Debug, Clone)]
pub struct SeriesBlock {
    rows: usize,
    cols: usize,
    len: usize,
    data: Vec<f64>,
}

impl SeriesBlock {
    pub fn zeros(rows: usize, cols: usize, len: usize) -> Self {
        SeriesBlock {
            rows,
            cols,
            len,
            data: vec![0.0; rows * cols * len],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, n: usize) -> f64 {
        self.data[(i * self.cols + j) * self.len + n]
    }

    /// Full sample series of one matrix entry.
    #[inline]
    pub fn series(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.cols + j) * self.len;
        &self.data[base..base + self.len]
    }

    fn series_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let base = (i * self.cols + j) * self.len;
        &mut self.data[base..base + self.len]
    }

    fn set_node(&mut self, n: usize, m: &DMatrix<f64>) {
        debug_assert_eq!((m.nrows(), m.ncols()), (self.rows, self.cols));
        for i in 0..self.rows {
            for j in 0..self.cols {
                self.data[(i * self.cols + j) * self.len + n] = m[(i, j)];
            }
        }
    }

    /// Matrix snapshot at node `n`.
    pub fn node(&self, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.at(i, j, n))
    }

    /// Column sums at node `n` (total over the row index).
    pub fn column_sums(&self, n: usize) -> DVector<f64> {
        DVector::from_fn(self.cols, |j, _| {
            (0..self.rows).map(|i| self.at(i, j, n)).sum()
        })
    }
}

/// Inhomogeneous terms of the renewal system produced by an initial state:
/// arrival forcing `S0_a`, departure forcing `J0_a`, and initial totals.
#[derive(Debug, Clone)]
pub struct Forcing {
    s0: Vec<SeriesBlock>,
    j0: Vec<SeriesBlock>,
    n0: Vec<f64>,
}

impl Forcing {
    pub fn zero(sizes: &[usize], grid: &TimeGrid) -> Self {
        Forcing {
            s0: sizes.iter().map(|&s| SeriesBlock::zeros(s, 1, grid.len())).collect(),
            j0: sizes.iter().map(|&s| SeriesBlock::zeros(s, 1, grid.len())).collect(),
            n0: vec![0.0; sizes.len()],
        }
    }

    pub fn s0(&self, alpha: usize) -> &SeriesBlock {
        &self.s0[alpha]
    }

    pub fn j0(&self, alpha: usize) -> &SeriesBlock {
        &self.j0[alpha]
    }

    pub fn n0(&self) -> &[f64] {
        &self.n0
    }
}

/// Sampled matrix kernels of a compartment system.
#[derive(Debug, Clone)]
pub struct KernelSet {
    grid: TimeGrid,
    sizes: Vec<usize>,
    g: BTreeMap<(usize, usize), SeriesBlock>,
    k: Vec<SeriesBlock>,
    forcing: Forcing,
}

impl KernelSet {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_compartments(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Pair kernel from `beta` into `alpha`, if the coupling block is nonzero.
    pub fn g(&self, beta: usize, alpha: usize) -> Option<&SeriesBlock> {
        self.g.get(&(beta, alpha))
    }

    /// All pair kernels, keyed `(from, to)`.
    pub fn pairs(&self) -> impl Iterator<Item = (&(usize, usize), &SeriesBlock)> {
        self.g.iter()
    }

    pub fn k(&self, alpha: usize) -> &SeriesBlock {
        &self.k[alpha]
    }

    pub fn forcing(&self) -> &Forcing {
        &self.forcing
    }

    pub fn set_forcing(&mut self, forcing: Forcing) -> Result<()> {
        if forcing.n0.len() != self.sizes.len() {
            return Err(Error::InvalidInput(
                "forcing compartment count does not match kernels".into(),
            ));
        }
        for (alpha, &size) in self.sizes.iter().enumerate() {
            if forcing.s0[alpha].rows() != size
                || forcing.j0[alpha].rows() != size
                || forcing.s0[alpha].len() != self.grid.len()
                || forcing.j0[alpha].len() != self.grid.len()
            {
                return Err(Error::InvalidInput(format!(
                    "forcing series for compartment {alpha} has the wrong shape"
                )));
            }
        }
        self.forcing = forcing;
        Ok(())
    }

    /// Largest deviation over nodes and compartments of the exit identity:
    /// the column sums of `K_b` must equal the summed column sums of all
    /// `G_{b->a}`. Both sides sample the same propagator, so this should sit
    /// at rounding level for kernels produced by [`compute_kernels`].
    pub fn exit_identity_deviation(&self) -> f64 {
        let mut worst = 0.0f64;
        for beta in 0..self.n_compartments() {
            for n in 0..self.grid.len() {
                let k_sums = self.k[beta].column_sums(n);
                let mut g_sums = DVector::zeros(self.sizes[beta]);
                for ((from, _to), block) in self.g.iter().filter(|((f, _), _)| *f == beta) {
                    debug_assert_eq!(*from, beta);
                    g_sums += block.column_sums(n);
                }
                worst = worst.max((k_sums - g_sums).amax());
            }
        }
        worst
    }
}

/// Sample all pair and departure kernels of `system` on `grid`.
pub fn compute_kernels(system: &CompartmentSystem, grid: &TimeGrid) -> Result<KernelSet> {
    let m = system.n_compartments();
    let len = grid.len();
    let sizes: Vec<usize> = (0..m).map(|a| system.size(a)).collect();

    let mut g: BTreeMap<(usize, usize), SeriesBlock> = BTreeMap::new();
    let mut k: Vec<SeriesBlock> = Vec::with_capacity(m);

    for beta in 0..m {
        let diag = system.block(beta, beta);
        let step = expm(&(&diag * grid.dt()))
            .map_err(|e| Error::Numeric(format!("propagator for compartment {beta}: {e}")))?;
        let exits = system.exit_rates(beta);
        let couplings: Vec<(usize, DMatrix<f64>)> = (0..m)
            .filter(|&alpha| alpha != beta && system.feeds(beta, alpha))
            .map(|alpha| (alpha, system.block(alpha, beta)))
            .collect();

        let mut k_block = SeriesBlock::zeros(sizes[beta], sizes[beta], len);
        for &(alpha, _) in &couplings {
            g.insert((beta, alpha), SeriesBlock::zeros(sizes[alpha], sizes[beta], len));
        }

        let mut prop = DMatrix::identity(sizes[beta], sizes[beta]);
        for n in 0..len {
            let mut k_node = prop.clone();
            for i in 0..sizes[beta] {
                for j in 0..sizes[beta] {
                    k_node[(i, j)] *= exits[i];
                }
            }
            k_block.set_node(n, &k_node);
            for (alpha, block) in &couplings {
                let node = block * &prop;
                g.get_mut(&(beta, *alpha)).unwrap().set_node(n, &node);
            }
            if n + 1 < len {
                prop = &step * &prop;
            }
        }
        k.push(k_block);
    }

    Ok(KernelSet {
        grid: *grid,
        sizes,
        g,
        k,
        forcing: Forcing::zero(&(0..m).map(|a| system.size(a)).collect::<Vec<_>>(), grid),
    })
}

/// Forcing terms produced by an initial per-state distribution `n0`.
pub fn compute_forcing(
    kernels: &KernelSet,
    system: &CompartmentSystem,
    n0: &DVector<f64>,
) -> Result<Forcing> {
    if n0.len() != system.network().n_states() {
        return Err(Error::InvalidInput(format!(
            "initial state has {} entries, network has {}",
            n0.len(),
            system.network().n_states()
        )));
    }
    if n0.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::InvalidInput(
            "initial state must be nonnegative and finite".into(),
        ));
    }
    let parts = system.split_state(n0);
    let len = kernels.grid().len();
    let m = system.n_compartments();
    let mut forcing = Forcing::zero(kernels.sizes(), kernels.grid());
    forcing.n0 = system.compartment_totals(n0);

    // arrivals: S0_a = sum_b G_{b->a} n0_b
    for ((beta, alpha), block) in kernels.pairs() {
        let src = &parts[*beta];
        for i in 0..block.rows() {
            for j in 0..block.cols() {
                let w = src[j];
                if w == 0.0 {
                    continue;
                }
                let from = block.series(i, j);
                let dst = forcing.s0[*alpha].series_mut(i, 0);
                for n in 0..len {
                    dst[n] += w * from[n];
                }
            }
        }
    }
    // departures: J0_a = K_a n0_a
    for alpha in 0..m {
        let block = kernels.k(alpha);
        let src = &parts[alpha];
        for i in 0..block.rows() {
            for j in 0..block.cols() {
                let w = src[j];
                if w == 0.0 {
                    continue;
                }
                let from = block.series(i, j);
                let dst = forcing.j0[alpha].series_mut(i, 0);
                for n in 0..len {
                    dst[n] += w * from[n];
                }
            }
        }
    }
    Ok(forcing)
}

/// Scalar kernels of a one-entrance decomposition, plus scalar forcing.
#[derive(Debug, Clone)]
pub struct ScalarKernelSet {
    grid: TimeGrid,
    labels: Vec<String>,
    phi: BTreeMap<(usize, usize), Vec<f64>>,
    k: Vec<Vec<f64>>,
    b0: Vec<Vec<f64>>,
    d0: Vec<Vec<f64>>,
    n0: Vec<f64>,
}

impl ScalarKernelSet {
    /// Assemble from explicit samples. `k` defaults to the pair sums when not
    /// given. Kernels must be nonnegative (up to rounding noise).
    pub fn from_parts(
        grid: TimeGrid,
        labels: Vec<String>,
        phi: BTreeMap<(usize, usize), Vec<f64>>,
        k: Option<Vec<Vec<f64>>>,
        b0: Option<Vec<Vec<f64>>>,
        d0: Option<Vec<Vec<f64>>>,
        n0: Option<Vec<f64>>,
    ) -> Result<Self> {
        let m = labels.len();
        if m < 2 {
            return Err(Error::InvalidInput("need at least two compartments".into()));
        }
        let len = grid.len();
        for (&(a, b), series) in &phi {
            if a >= m || b >= m || a == b {
                return Err(Error::InvalidInput(format!(
                    "kernel pair ({a}, {b}) out of range"
                )));
            }
            if series.len() != len {
                return Err(Error::InvalidInput(format!(
                    "kernel ({a}, {b}) has {} samples, grid has {len}",
                    series.len()
                )));
            }
            if series.iter().any(|&x| !x.is_finite() || x < -1e-9) {
                return Err(Error::InvalidInput(format!(
                    "kernel ({a}, {b}) must be nonnegative and finite"
                )));
            }
        }
        let k = match k {
            Some(k) => {
                if k.len() != m || k.iter().any(|s| s.len() != len) {
                    return Err(Error::InvalidInput("departure kernel shape mismatch".into()));
                }
                k
            }
            None => {
                let mut k = vec![vec![0.0; len]; m];
                for (&(a, _), series) in &phi {
                    for (n, v) in series.iter().enumerate() {
                        k[a][n] += v;
                    }
                }
                k
            }
        };
        let zero_series = || vec![vec![0.0; len]; m];
        let b0 = b0.unwrap_or_else(zero_series);
        let d0 = d0.unwrap_or_else(zero_series);
        let n0 = n0.unwrap_or_else(|| vec![0.0; m]);
        if b0.len() != m || d0.len() != m || n0.len() != m {
            return Err(Error::InvalidInput("forcing shape mismatch".into()));
        }
        if b0.iter().chain(d0.iter()).any(|s| s.len() != len) {
            return Err(Error::InvalidInput("forcing series length mismatch".into()));
        }
        Ok(ScalarKernelSet {
            grid,
            labels,
            phi,
            k,
            b0,
            d0,
            n0,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_compartments(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn phi(&self, from: usize, to: usize) -> Option<&[f64]> {
        self.phi.get(&(from, to)).map(|v| v.as_slice())
    }

    pub fn pairs(&self) -> impl Iterator<Item = ((usize, usize), &[f64])> {
        self.phi.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn k(&self, alpha: usize) -> &[f64] {
        &self.k[alpha]
    }

    pub fn b0(&self, alpha: usize) -> &[f64] {
        &self.b0[alpha]
    }

    pub fn d0(&self, alpha: usize) -> &[f64] {
        &self.d0[alpha]
    }

    pub fn n0(&self) -> &[f64] {
        &self.n0
    }

    pub fn has_forcing(&self) -> bool {
        self.n0.iter().any(|&x| x != 0.0)
            || self.b0.iter().chain(self.d0.iter()).any(|s| s.iter().any(|&x| x != 0.0))
    }

    /// Transfer mass `p_{a->b}` of one pair over the sampled window.
    pub fn pair_mass(&self, from: usize, to: usize) -> f64 {
        self.phi(from, to)
            .map(|s| trapezoid(s, self.grid.dt()))
            .unwrap_or(0.0)
    }

    /// All transfer masses.
    pub fn masses(&self) -> BTreeMap<(usize, usize), f64> {
        self.phi
            .keys()
            .map(|&(a, b)| ((a, b), self.pair_mass(a, b)))
            .collect()
    }

    /// Largest deviation of `sum_b Phi_{a->b}` from `k_a` over all nodes.
    pub fn exit_consistency_deviation(&self) -> f64 {
        let len = self.grid.len();
        let m = self.n_compartments();
        let mut worst = 0.0f64;
        for a in 0..m {
            for n in 0..len {
                let s: f64 = (0..m)
                    .filter_map(|b| self.phi(a, b).map(|series| series[n]))
                    .sum();
                worst = worst.max((s - self.k[a][n]).abs());
            }
        }
        worst
    }

    /// Restriction to the first `steps` steps of the grid.
    pub fn truncate(&self, steps: usize) -> Result<ScalarKernelSet> {
        let grid = TimeGrid::from_steps(self.grid.dt(), steps)?;
        if steps > self.grid.steps() {
            return Err(Error::InvalidInput(
                "cannot truncate to a longer grid".into(),
            ));
        }
        let len = grid.len();
        let cut = |v: &Vec<f64>| v[..len].to_vec();
        Ok(ScalarKernelSet {
            grid,
            labels: self.labels.clone(),
            phi: self.phi.iter().map(|(&k, v)| (k, cut(v))).collect(),
            k: self.k.iter().map(cut).collect(),
            b0: self.b0.iter().map(cut).collect(),
            d0: self.d0.iter().map(cut).collect(),
            n0: self.n0.clone(),
        })
    }

    pub fn set_scalar_forcing(
        &mut self,
        b0: Vec<Vec<f64>>,
        d0: Vec<Vec<f64>>,
        n0: Vec<f64>,
    ) -> Result<()> {
        let m = self.n_compartments();
        let len = self.grid.len();
        if b0.len() != m || d0.len() != m || n0.len() != m {
            return Err(Error::InvalidInput("forcing shape mismatch".into()));
        }
        if b0.iter().chain(d0.iter()).any(|s| s.len() != len) {
            return Err(Error::InvalidInput("forcing series length mismatch".into()));
        }
        self.b0 = b0;
        self.d0 = d0;
        self.n0 = n0;
        Ok(())
    }
}

/// Collapse matrix kernels to scalars when every receiving compartment has a
/// unique entrance state. Compartments that receive nothing stay in the
/// system but carry no kernels; their departures live entirely in the
/// forcing. Compartments with several entrance states are refused.
pub fn reduce_one_entrance(
    kernels: &KernelSet,
    system: &CompartmentSystem,
) -> Result<ScalarKernelSet> {
    let entrances = system.scalar_entrances()?;
    let m = system.n_compartments();
    let len = kernels.grid().len();

    let mut phi = BTreeMap::new();
    for ((beta, alpha), block) in kernels.pairs() {
        let Some(i_alpha) = entrances[*alpha] else {
            unreachable!("a fed compartment always has an entrance");
        };
        let Some(i_beta) = entrances[*beta] else {
            // nothing ever arrives in beta, so no renewal flux originates there;
            // its initial mass drains through the forcing instead
            continue;
        };
        let row = system.local_index(i_alpha);
        let col = system.local_index(i_beta);
        phi.insert((*beta, *alpha), block.series(row, col).to_vec());
    }

    let mut k = vec![vec![0.0; len]; m];
    for alpha in 0..m {
        if let Some(i_alpha) = entrances[alpha] {
            let col = system.local_index(i_alpha);
            let block = kernels.k(alpha);
            for i in 0..block.rows() {
                let series = block.series(i, col);
                for n in 0..len {
                    k[alpha][n] += series[n];
                }
            }
        }
    }

    let forcing = kernels.forcing();
    let mut b0 = vec![vec![0.0; len]; m];
    let mut d0 = vec![vec![0.0; len]; m];
    for alpha in 0..m {
        if let Some(i_alpha) = entrances[alpha] {
            let row = system.local_index(i_alpha);
            b0[alpha] = forcing.s0(alpha).series(row, 0).to_vec();
        }
        let j0 = forcing.j0(alpha);
        for i in 0..j0.rows() {
            let series = j0.series(i, 0);
            for n in 0..len {
                d0[alpha][n] += series[n];
            }
        }
    }

    ScalarKernelSet::from_parts(
        *kernels.grid(),
        system.labels(),
        phi,
        Some(k),
        Some(b0),
        Some(d0),
        Some(forcing.n0().to_vec()),
    )
}

/// Scalar reduction that never forms matrix kernels: each compartment's
/// passage densities come from propagating its entrance column through the
/// diagonal block with a sparse exponential action. Mathematically identical
/// to [`compute_kernels`] + [`reduce_one_entrance`], but linear instead of
/// cubic in block size, which is what stage-chain realizations with
/// thousands of states need.
///
/// `entrances[alpha]` is the global state where arrivals into `alpha` enter.
/// Compartments that receive transfers must be designated consistently with
/// every inbound edge; compartments nothing feeds (pure sources) accept any
/// of their own states. No forcing is attached.
pub fn reduce_entrances(
    system: &CompartmentSystem,
    grid: &TimeGrid,
    entrances: &[usize],
) -> Result<ScalarKernelSet> {
    let m = system.n_compartments();
    if entrances.len() != m {
        return Err(Error::InvalidInput(format!(
            "{} entrance designations for {m} compartments",
            entrances.len()
        )));
    }
    let a = system.network().matrix();
    let n_states = system.network().n_states();
    for (alpha, &e) in entrances.iter().enumerate() {
        if e >= n_states || system.compartment_of(e) != alpha {
            return Err(Error::InvalidInput(format!(
                "designated entrance {e} does not belong to compartment {alpha}"
            )));
        }
    }
    for j in 0..n_states {
        for i in 0..n_states {
            let beta = system.compartment_of(i);
            if a[(i, j)] > 0.0 && system.compartment_of(j) != beta && i != entrances[beta] {
                return Err(Error::Unsupported(format!(
                    "compartment {beta} receives transfers at state {i}, away from \
                     its designated entrance {}; a scalar kernel cannot carry that",
                    entrances[beta]
                )));
            }
        }
    }

    let len = grid.len();
    let mut phi: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut k = vec![vec![0.0; len]; m];
    for beta in 0..m {
        let action = ExpmAction::new(&system.block(beta, beta), grid.dt())?;
        let exits = system.exit_rates(beta);
        let mut outgoing: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for &gj in system.states_of(beta) {
            let lj = system.local_index(gj);
            for gi in 0..n_states {
                let alpha = system.compartment_of(gi);
                if alpha != beta && a[(gi, gj)] > 0.0 {
                    outgoing.entry(alpha).or_default().push((lj, a[(gi, gj)]));
                }
            }
        }
        let mut series: BTreeMap<usize, Vec<f64>> = outgoing
            .keys()
            .map(|&alpha| (alpha, vec![0.0; len]))
            .collect();
        let mut v = vec![0.0; system.size(beta)];
        v[system.local_index(entrances[beta])] = 1.0;
        for node in 0..len {
            for (alpha, edges) in &outgoing {
                series.get_mut(alpha).unwrap()[node] =
                    edges.iter().map(|&(lj, r)| r * v[lj]).sum();
            }
            k[beta][node] = exits.iter().zip(&v).map(|(e, x)| e * x).sum();
            if node + 1 < len {
                action.apply(&mut v);
            }
        }
        for (alpha, s) in series {
            phi.insert((beta, alpha), s);
        }
    }

    ScalarKernelSet::from_parts(*grid, system.labels(), phi, Some(k), None, None, None)
}

/// How a compartment's outgoing transfer mass classifies it.
#[derive(Debug, Clone, PartialEq)]
pub enum MassClass {
    /// Everything that arrives eventually leaves: total mass 1.
    Conservative,
    /// Nothing leaves (absorbing compartment).
    Sink,
    /// A strict deficit remains (internal absorption or truncation); the
    /// payload is the missing mass.
    Leaky(f64),
}

#[derive(Debug, Clone)]
pub struct MassRow {
    pub comp: usize,
    pub label: String,
    pub outgoing: Vec<(usize, f64)>,
    pub total: f64,
    pub class: MassClass,
}

#[derive(Debug, Clone)]
pub struct MassReport {
    pub rows: Vec<MassRow>,
    pub tol: f64,
}

/// Classify each compartment by its outgoing kernel masses.
pub fn kernel_mass_report(scalar: &ScalarKernelSet, tol: f64) -> MassReport {
    let m = scalar.n_compartments();
    let rows = (0..m)
        .map(|a| {
            let outgoing: Vec<(usize, f64)> = (0..m)
                .filter(|&b| scalar.phi(a, b).is_some())
                .map(|b| (b, scalar.pair_mass(a, b)))
                .collect();
            let total: f64 = outgoing.iter().map(|(_, p)| p).sum();
            let class = if total <= tol {
                MassClass::Sink
            } else if (1.0 - total).abs() <= tol {
                MassClass::Conservative
            } else {
                MassClass::Leaky(1.0 - total)
            };
            MassRow {
                comp: a,
                label: scalar.labels()[a].clone(),
                outgoing,
                total,
                class,
            }
        })
        .collect();
    MassReport { rows, tol }
}

/// Grid horizon at which every kernel falls below `floor`, from the slowest
/// decaying eigenvalue across diagonal blocks. Compartments without exit
/// edges produce identically zero kernels; they are reported as warnings and
/// skipped. If no compartment exits at all, the horizon is undefined.
pub fn suggest_t_max(system: &CompartmentSystem, floor: f64) -> Result<(f64, Vec<String>)> {
    if !(floor > 0.0 && floor < 1.0) {
        return Err(Error::InvalidInput(format!(
            "floor must lie in (0, 1), got {floor}"
        )));
    }
    let mut warnings = Vec::new();
    let mut slowest: Option<f64> = None;
    for beta in 0..system.n_compartments() {
        if system.exit_rates(beta).amax() == 0.0 {
            warnings.push(format!(
                "compartment {beta} is closed (no exits); its kernels vanish identically"
            ));
            continue;
        }
        let block = system.block(beta, beta);
        let scale = block.amax().max(1e-300);
        // eigenvalues at ~0 belong to internal closed subsets, which carry no
        // exit rate and hence no kernel weight
        let rate = block
            .complex_eigenvalues()
            .iter()
            .map(|l| -l.re)
            .filter(|&r| r > 1e-12 * scale)
            .fold(f64::INFINITY, f64::min);
        if rate.is_finite() {
            slowest = Some(slowest.map_or(rate, |s: f64| s.min(rate)));
        }
    }
    match slowest {
        Some(rate) => Ok(((1.0 / floor).ln() / rate, warnings)),
        None => Err(Error::Unsupported(
            "no compartment has an exit; every kernel is identically zero".into(),
        )),
    }
}
