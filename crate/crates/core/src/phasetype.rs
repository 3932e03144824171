//! Phase-type approximation of completion-time kernels.
//!
//! Any completion-time law on `[0, inf)` can be approximated weakly by a
//! mixture of Erlang laws sharing one rate: split the support into `M`
//! cells of width `h = s/M`, give cell `j` (covering `((j-1)h, jh]`) the
//! target mass `q_j`, and represent it by an Erlang with shape `j` and
//! rate `1/h` (mean `jh`). The mixture is realized exactly by a chain
//! network — a root state with exit rate `1/h` fanning into sequential
//! stages — so a fitted model can be rebuilt as an explicit reaction
//! network whose reduction reproduces the mixture.
//!
//! Approximation quality is measured in the bounded-Lipschitz distance
//! `d_w(mu, nu) = sup { int f d(mu - nu) : ||f||_inf + Lip(f) <= 1 }`,
//! evaluated on a dual grid by an exact linear-programming sweep.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernel::ScalarKernelSet;
use crate::network::{CompartmentSystem, RateEntry, ReactionNetwork};
use crate::numeric::cumulative_trapezoid;

/// Name of the distance reported by this module.
pub const METRIC_NAME: &str = "bounded-Lipschitz (dual-grid)";

/// Weights below this are dropped from fitted mixtures.
const PRUNE_FLOOR: f64 = 1e-12;

/// Largest state count `to_network` will densify. The dense generator is
/// quadratic in states (33 MB at the cap); reductions of densified chains
/// should go through the column-propagation route, which is linear per node.
const MAX_DENSE_STATES: usize = 2048;

// ---------------------------------------------------------------------------
// target laws

/// A probability law on `[0, inf)` to be approximated. Defective kernels
/// are handled by normalizing the law and carrying the total mass
/// separately (see [`ApproxTarget`]).
#[derive(Debug, Clone)]
pub enum TargetMeasure {
    /// Density samples on a uniform grid, normalized at construction.
    Empirical { grid: TimeGrid, cdf: Vec<f64> },
    Uniform { a: f64, b: f64 },
    Erlang { shape: u32, rate: f64 },
}

impl TargetMeasure {
    /// Normalize density samples into an empirical law. The samples'
    /// own mass (the kernel defect) is the caller's to keep.
    pub fn from_samples(grid: &TimeGrid, density: &[f64]) -> Result<Self> {
        if density.len() != grid.len() {
            return Err(Error::InvalidGrid(
                "density samples must live on the stated grid".into(),
            ));
        }
        if density.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "completion density must be finite and nonnegative".into(),
            ));
        }
        let mut cdf = cumulative_trapezoid(density, grid.dt());
        let total = *cdf.last().unwrap();
        if total <= 1e-12 {
            return Err(Error::InvalidInput(
                "completion density carries no mass on the grid".into(),
            ));
        }
        for v in &mut cdf {
            *v /= total;
        }
        Ok(Self::Empirical { grid: *grid, cdf })
    }

    pub fn uniform(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) || a < 0.0 || b <= a {
            return Err(Error::InvalidInput(format!(
                "uniform law needs 0 <= a < b, got [{a}, {b}]"
            )));
        }
        Ok(Self::Uniform { a, b })
    }

    pub fn erlang(shape: u32, rate: f64) -> Result<Self> {
        if shape == 0 || !rate.is_finite() || rate <= 0.0 {
            return Err(Error::InvalidInput(
                "Erlang law needs shape >= 1 and rate > 0".into(),
            ));
        }
        Ok(Self::Erlang { shape, rate })
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match self {
            Self::Empirical { grid, cdf } => {
                let pos = x / grid.dt();
                let k = pos.floor() as usize;
                if k + 1 >= cdf.len() {
                    return 1.0;
                }
                let frac = pos - k as f64;
                cdf[k] + frac * (cdf[k + 1] - cdf[k])
            }
            Self::Uniform { a, b } => ((x - a) / (b - a)).clamp(0.0, 1.0),
            Self::Erlang { shape, rate } => erlang_cdf(*shape, *rate, x),
        }
    }

    /// Smallest `x` with `cdf(x) >= p`, for `p` in `(0, 1)`.
    pub fn quantile(&self, p: f64) -> f64 {
        match self {
            Self::Empirical { grid, cdf } => {
                let k = cdf.partition_point(|&v| v < p);
                if k == 0 {
                    return 0.0;
                }
                if k >= cdf.len() {
                    return grid.t_max();
                }
                let span = cdf[k] - cdf[k - 1];
                let frac = if span > 0.0 { (p - cdf[k - 1]) / span } else { 0.0 };
                grid.dt() * (k as f64 - 1.0 + frac)
            }
            Self::Uniform { a, b } => a + p * (b - a),
            Self::Erlang { shape, rate } => {
                let mut hi = (*shape as f64 + 20.0 * (*shape as f64).sqrt() + 20.0) / rate;
                while erlang_cdf(*shape, *rate, hi) < p {
                    hi *= 2.0;
                }
                let mut lo = 0.0;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if erlang_cdf(*shape, *rate, mid) < p {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }

    /// Essentially the end of the support, used to size dual grids.
    fn upper_hint(&self) -> f64 {
        match self {
            Self::Empirical { grid, .. } => grid.t_max(),
            Self::Uniform { b, .. } => *b,
            Self::Erlang { .. } => self.quantile(1.0 - 1e-9),
        }
    }
}

// ---------------------------------------------------------------------------
// Erlang evaluation (shared rate, many shapes)

/// CDF of Erlang(shape, rate) at `x`, via the Poisson tail identity with a
/// log-space recurrence so large shapes stay stable.
pub fn erlang_cdf(shape: u32, rate: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let t = rate * x;
    let lt = t.ln();
    let mut lp = -t;
    let mut below = 0.0;
    for k in 0..shape {
        if k > 0 {
            lp += lt - (k as f64).ln();
        }
        if lp > -45.0 {
            below += lp.exp();
        }
    }
    (1.0 - below).clamp(0.0, 1.0)
}

/// Mixture CDF `sum_j w_j Erlang(shape_j, rate)` at each `x`, sharing one
/// Poisson prefix table per evaluation point.
pub fn mixture_cdf(rate: f64, branches: &[Branch], xs: &[f64]) -> Vec<f64> {
    let max_shape = branches.iter().map(|b| b.shape).max().unwrap_or(1) as usize;
    let total: f64 = branches.iter().map(|b| b.weight).sum();
    let mut prefix = vec![0.0f64; max_shape];
    xs.iter()
        .map(|&x| {
            if x <= 0.0 {
                return 0.0;
            }
            let t = rate * x;
            let lt = t.ln();
            let mut lp = -t;
            let mut acc = 0.0;
            for (k, slot) in prefix.iter_mut().enumerate() {
                if k > 0 {
                    lp += lt - (k as f64).ln();
                }
                if lp > -45.0 {
                    acc += lp.exp();
                }
                *slot = acc;
            }
            let mut cdf = 0.0;
            for b in branches {
                cdf += b.weight * (1.0 - prefix[(b.shape - 1) as usize].min(1.0));
            }
            cdf.clamp(0.0, total)
        })
        .collect()
}

/// Quadrature + analytic-tail check of the mixture's total mass; exists to
/// cross-check the closed-form evaluators in tests and reports.
pub fn mixture_mass_quadrature(rate: f64, branches: &[Branch], points: usize) -> f64 {
    let max_shape = branches.iter().map(|b| b.shape).max().unwrap_or(1);
    let span = (max_shape as f64 + 8.0 * (max_shape as f64).sqrt() + 8.0) / rate;
    let h = span / points as f64;
    let mut lnfact = vec![0.0f64; max_shape as usize + 1];
    for k in 1..lnfact.len() {
        lnfact[k] = lnfact[k - 1] + (k as f64).ln();
    }
    let density = |x: f64| -> f64 {
        if x <= 0.0 {
            // only exponential branches carry density at the origin
            return branches
                .iter()
                .filter(|b| b.shape == 1)
                .map(|b| b.weight * rate)
                .sum();
        }
        let lx = x.ln();
        let lr = rate.ln();
        branches
            .iter()
            .map(|b| {
                let s = b.shape as f64;
                let ld = s * lr + (s - 1.0) * lx - rate * x - lnfact[(b.shape - 1) as usize];
                if ld > -700.0 {
                    b.weight * ld.exp()
                } else {
                    0.0
                }
            })
            .sum()
    };
    let mut quad = 0.0;
    for i in 0..=points {
        let w = if i == 0 || i == points { 0.5 } else { 1.0 };
        quad += w * density(i as f64 * h);
    }
    quad *= h;
    let tails: f64 = branches
        .iter()
        .map(|b| b.weight * (1.0 - erlang_cdf(b.shape, rate, span)))
        .sum();
    quad + tails
}

// ---------------------------------------------------------------------------
// bounded-Lipschitz distance

/// Exact optimum of `sum_i f_i d_i` over `|f_i| <= bound`,
/// `|f_{i+1} - f_i| <= lip * h`, by a concave piecewise-linear value
/// sweep: the value function in the current `f_i` stays concave, so each
/// step is a window maximum (which flattens a plateau around the peak),
/// a clamp to the box, and a linear shear.
fn constrained_sweep(delta: &[f64], h: f64, bound: f64, lip: f64) -> f64 {
    if delta.is_empty() {
        return 0.0;
    }
    if bound <= 0.0 {
        return 0.0;
    }
    let omega = lip * h;
    // breakpoints of the concave value function, left to right
    let mut pts: Vec<(f64, f64)> = vec![(-bound, -delta[0] * bound), (bound, delta[0] * bound)];
    for &d in &delta[1..] {
        if omega > 0.0 {
            let mut imax = 0;
            for (i, p) in pts.iter().enumerate() {
                if p.1 > pts[imax].1 {
                    imax = i;
                }
            }
            let peak = pts[imax];
            let mut widened = Vec::with_capacity(pts.len() + 2);
            for p in &pts[..imax] {
                widened.push((p.0 - omega, p.1));
            }
            widened.push((peak.0 - omega, peak.1));
            widened.push((peak.0 + omega, peak.1));
            for p in &pts[imax + 1..] {
                widened.push((p.0 + omega, p.1));
            }
            pts = clamp_domain(&widened, bound);
        }
        for p in &mut pts {
            p.1 += d * p.0;
        }
    }
    pts.iter().fold(f64::NEG_INFINITY, |m, p| m.max(p.1))
}

/// Restrict a piecewise-linear function (given by breakpoints spanning at
/// least `[-bound, bound]`) to that interval.
fn clamp_domain(pts: &[(f64, f64)], bound: f64) -> Vec<(f64, f64)> {
    let at = |x: f64| -> f64 {
        let k = pts.partition_point(|p| p.0 < x);
        if k == 0 {
            return pts[0].1;
        }
        if k >= pts.len() {
            return pts[pts.len() - 1].1;
        }
        let (x0, v0) = pts[k - 1];
        let (x1, v1) = pts[k];
        if x1 - x0 <= 0.0 {
            return v0.max(v1);
        }
        v0 + (v1 - v0) * (x - x0) / (x1 - x0)
    };
    let mut out = Vec::with_capacity(pts.len());
    out.push((-bound, at(-bound)));
    for p in pts {
        if p.0 > -bound && p.0 < bound {
            out.push(*p);
        }
    }
    out.push((bound, at(bound)));
    out
}

/// Bounded-Lipschitz distance between two discrete measures supported on
/// the grid `x_i = i * h`: `sup { sum f(x_i)(mu_i - nu_i) }` over test
/// functions with `||f||_inf + Lip(f) <= 1`. The norm budget is split by
/// a golden-section search (the optimum is concave in the split).
pub fn bounded_lipschitz_discrete(mu: &[f64], nu: &[f64], h: f64) -> f64 {
    assert_eq!(mu.len(), nu.len(), "measures must share the grid");
    let delta: Vec<f64> = mu.iter().zip(nu).map(|(a, b)| a - b).collect();
    let eval = |beta: f64| constrained_sweep(&delta, h, beta, 1.0 - beta);
    let inv_phi = 0.618_033_988_749_894_9_f64;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = eval(x1);
    let mut f2 = eval(x2);
    let mut best = f1.max(f2).max(eval(1.0)).max(0.0);
    for _ in 0..80 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = eval(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = eval(x1);
        }
        best = best.max(f1).max(f2);
    }
    best
}

/// Wasserstein-1 distance between equal-mass discrete measures on the
/// grid `x_i = i * h`; an upper bound for the bounded-Lipschitz distance.
pub fn w1_upper_discrete(mu: &[f64], nu: &[f64], h: f64) -> f64 {
    assert_eq!(mu.len(), nu.len(), "measures must share the grid");
    let mut acc = 0.0;
    let mut total = 0.0;
    for (a, b) in mu.iter().zip(nu) {
        acc += a - b;
        total += acc.abs();
    }
    total * h
}

/// Discretize a CDF onto `cells` dual-grid cells over `[0, upper]`,
/// placing each cell's mass at its left edge and folding any tail into
/// the last cell.
fn cell_masses(cdf: impl Fn(f64) -> f64, total: f64, upper: f64, cells: usize) -> Vec<f64> {
    let h = upper / cells as f64;
    let mut out = Vec::with_capacity(cells);
    let mut prev = 0.0;
    for j in 1..=cells {
        let c = cdf(j as f64 * h);
        out.push((c - prev).max(0.0));
        prev = c;
    }
    let tail = (total - prev).max(0.0);
    *out.last_mut().unwrap() += tail;
    out
}

/// Bounded-Lipschitz distance between a target law and an Erlang mixture,
/// both normalized to unit mass, on a `dual_cells`-point dual grid.
pub fn law_distance(
    target: &TargetMeasure,
    rate: f64,
    branches: &[Branch],
    dual_cells: usize,
) -> f64 {
    let weight: f64 = branches.iter().map(|b| b.weight).sum();
    let max_shape = branches.iter().map(|b| b.shape).max().unwrap_or(1) as f64;
    let mix_upper = (max_shape + 8.0 * max_shape.sqrt() + 8.0) / rate;
    let upper = target.upper_hint().max(mix_upper);
    let h = upper / dual_cells as f64;
    let edges: Vec<f64> = (1..=dual_cells).map(|j| j as f64 * h).collect();
    let mix_cdf = mixture_cdf(rate, branches, &edges);
    let mut nu = Vec::with_capacity(dual_cells);
    let mut prev = 0.0;
    for c in &mix_cdf {
        let c = if weight > 0.0 { c / weight } else { 0.0 };
        nu.push((c - prev).max(0.0));
        prev = c;
    }
    *nu.last_mut().unwrap() += (1.0 - prev).max(0.0);
    let mu = cell_masses(|x| target.cdf(x), 1.0, upper, dual_cells);
    bounded_lipschitz_discrete(&mu, &nu, h)
}

// ---------------------------------------------------------------------------
// fitting

/// One Erlang component: `weight` is the branch probability within the
/// (normalized) law, `shape` the number of rate-`rate` stages traversed.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub weight: f64,
    pub shape: u32,
}

/// Fitted approximation of one completion kernel `from -> to`.
#[derive(Debug, Clone)]
pub struct PairApprox {
    pub from: usize,
    pub to: usize,
    /// Routing probability (kernel mass); the branch weights describe the
    /// law conditional on completion and sum to ~1.
    pub mass: f64,
    pub rate: f64,
    /// Support scale the binning covered.
    pub span: f64,
    /// Achieved bounded-Lipschitz distance to the target law.
    pub distance: f64,
    pub branches: Vec<Branch>,
}

/// Erlang-mixture model of a scalar kernel set: one mixture per routed
/// pair, with every pair leaving a compartment sharing one rate (a root
/// state has a single total exit rate).
#[derive(Debug, Clone)]
pub struct PhaseTypeModel {
    labels: Vec<String>,
    pairs: Vec<PairApprox>,
}

impl PhaseTypeModel {
    pub fn new(labels: Vec<String>, pairs: Vec<PairApprox>) -> Result<Self> {
        let n = labels.len();
        let mut rate_of: BTreeMap<usize, f64> = BTreeMap::new();
        let mut out_mass: BTreeMap<usize, f64> = BTreeMap::new();
        for p in &pairs {
            if p.from >= n || p.to >= n || p.from == p.to {
                return Err(Error::InvalidInput(format!(
                    "pair {} -> {} does not fit {} compartments",
                    p.from, p.to, n
                )));
            }
            if !(p.rate.is_finite() && p.rate > 0.0) || !(0.0..=1.0 + 1e-9).contains(&p.mass) {
                return Err(Error::InvalidInput(
                    "pair needs a positive rate and mass in [0, 1]".into(),
                ));
            }
            if p.branches.is_empty() {
                return Err(Error::InvalidInput("pair has no branches".into()));
            }
            let wsum: f64 = p.branches.iter().map(|b| b.weight).sum();
            if p.branches.iter().any(|b| b.weight < 0.0 || b.shape == 0) || wsum > 1.0 + 1e-9 {
                return Err(Error::InvalidInput(
                    "branch weights must be nonnegative with sum <= 1 and shapes >= 1".into(),
                ));
            }
            if let Some(r) = rate_of.get(&p.from) {
                if (r - p.rate).abs() > 1e-9 * r.max(1.0) {
                    return Err(Error::InvalidInput(format!(
                        "compartment {} would need two root rates ({} and {})",
                        labels[p.from], r, p.rate
                    )));
                }
            } else {
                rate_of.insert(p.from, p.rate);
            }
            *out_mass.entry(p.from).or_insert(0.0) += p.mass;
        }
        for (alpha, m) in out_mass {
            if m > 1.0 + 1e-6 {
                return Err(Error::InvalidInput(format!(
                    "compartment {} routes mass {m:.6} > 1",
                    labels[alpha]
                )));
            }
        }
        Ok(Self { labels, pairs })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn pairs(&self) -> &[PairApprox] {
        &self.pairs
    }

    pub fn pair(&self, from: usize, to: usize) -> Option<&PairApprox> {
        self.pairs.iter().find(|p| p.from == from && p.to == to)
    }

    /// Shared root exit rate of a compartment, if it routes anywhere.
    pub fn rate_of(&self, alpha: usize) -> Option<f64> {
        self.pairs.iter().find(|p| p.from == alpha).map(|p| p.rate)
    }

    /// Total state count of the realization: one root per compartment
    /// plus `shape - 1` chain states per branch.
    pub fn n_states(&self) -> usize {
        let chain: usize = self
            .pairs
            .iter()
            .flat_map(|p| p.branches.iter())
            .map(|b| (b.shape - 1) as usize)
            .sum();
        let defect = self.pairs.iter().any(|p| p.mass < 1.0) || {
            let mut per: BTreeMap<usize, f64> = BTreeMap::new();
            for p in &self.pairs {
                *per.entry(p.from).or_insert(0.0) += p.mass;
            }
            per.values().any(|m| *m < 1.0 - 1e-12)
        };
        self.labels.len() + chain + usize::from(defect)
    }
}

/// A kernel to approximate: the law conditional on completion plus its
/// routing mass.
#[derive(Debug, Clone)]
pub struct ApproxTarget {
    pub from: usize,
    pub to: usize,
    pub mass: f64,
    pub law: TargetMeasure,
}

/// Knobs for the fit loop.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Required bounded-Lipschitz distance.
    pub eps: f64,
    /// Cell count of the first attempt; doubles until `eps` is met.
    pub start_cells: usize,
    /// Give up (with the best achieved distance) past this cell count.
    pub max_cells: usize,
    /// Quantile that defines the binned support scale.
    pub tail_quantile: f64,
    /// Dual-grid resolution for distance evaluation.
    pub dual_cells: usize,
}

impl FitOptions {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            start_cells: 16,
            max_cells: 4096,
            tail_quantile: 0.999,
            dual_cells: 2048,
        }
    }
}

/// Bin a law into an Erlang mixture at a fixed rate: cell `j` covers
/// `((j-1)h, jh]` with `h = 1/rate` and maps to shape `j`. The tail past
/// `cells * h` folds into the last cell; negligible weights are pruned.
pub fn binned_branches(target: &TargetMeasure, rate: f64, cells: usize) -> Vec<Branch> {
    let h = 1.0 / rate;
    let mut out = Vec::new();
    let mut prev = 0.0;
    for j in 1..=cells {
        let c = if j == cells { 1.0 } else { target.cdf(j as f64 * h) };
        let q = (c - prev).max(0.0);
        prev = c;
        if q >= PRUNE_FLOOR {
            out.push(Branch { weight: q, shape: j as u32 });
        }
    }
    out
}

/// A fitted law: binning scale, achieved distance, branches.
#[derive(Debug, Clone)]
pub struct FittedLaw {
    pub rate: f64,
    pub span: f64,
    pub distance: f64,
    pub cells: usize,
    pub branches: Vec<Branch>,
}

/// Fit one law by doubling the cell count until the bounded-Lipschitz
/// distance drops under `opts.eps`.
pub fn fit_single(target: &TargetMeasure, opts: &FitOptions) -> Result<FittedLaw> {
    if !(opts.eps > 0.0) {
        return Err(Error::InvalidInput("fit tolerance must be positive".into()));
    }
    let span = target.quantile(opts.tail_quantile);
    if !(span.is_finite() && span > 0.0) {
        return Err(Error::InvalidInput(format!(
            "target support scale {span} is unusable"
        )));
    }
    let mut cells = opts.start_cells.max(2);
    let mut best: Option<FittedLaw> = None;
    loop {
        let rate = cells as f64 / span;
        let branches = binned_branches(target, rate, cells);
        let distance = law_distance(target, rate, &branches, opts.dual_cells);
        let fit = FittedLaw { rate, span, distance, cells, branches };
        if distance <= opts.eps {
            return Ok(fit);
        }
        if best.as_ref().map_or(true, |b| distance < b.distance) {
            best = Some(fit);
        }
        if cells >= opts.max_cells {
            let b = best.unwrap();
            return Err(Error::Numeric(format!(
                "mixture fit stalled at d_w={:.3e} with {} cells (target {:.1e})",
                b.distance, b.cells, opts.eps
            )));
        }
        cells *= 2;
    }
}

/// Extract approximation targets from a scalar kernel set: every pair
/// whose kernel carries mass above a floor becomes a normalized law.
pub fn targets_from_scalar(scalar: &ScalarKernelSet) -> Result<Vec<ApproxTarget>> {
    let grid = scalar.grid();
    let mut out = Vec::new();
    for ((from, to), phi) in scalar.pairs() {
        let mass = scalar.pair_mass(from, to);
        if mass <= 1e-10 {
            continue;
        }
        out.push(ApproxTarget {
            from,
            to,
            mass,
            law: TargetMeasure::from_samples(grid, phi)?,
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(
            "no kernel carries mass; nothing to approximate".into(),
        ));
    }
    Ok(out)
}

/// Fit every target, then reconcile rates so all pairs leaving one
/// compartment share the root exit rate (the maximum over the group,
/// with slower pairs re-binned at the finer resolution).
pub fn fit_targets(
    labels: Vec<String>,
    targets: &[ApproxTarget],
    opts: &FitOptions,
) -> Result<PhaseTypeModel> {
    let mut fits: Vec<(usize, usize, f64, FittedLaw)> = Vec::new();
    for t in targets {
        if t.from >= labels.len() || t.to >= labels.len() {
            return Err(Error::InvalidInput(
                "target indices exceed the label list".into(),
            ));
        }
        fits.push((t.from, t.to, t.mass, fit_single(&t.law, opts)?));
    }
    let mut group_rate: BTreeMap<usize, f64> = BTreeMap::new();
    for (from, _, _, fit) in &fits {
        let r = group_rate.entry(*from).or_insert(fit.rate);
        *r = r.max(fit.rate);
    }
    let mut pairs = Vec::new();
    for ((from, to, mass, fit), target) in fits.into_iter().zip(targets) {
        let shared = group_rate[&from];
        let fit = if (shared - fit.rate).abs() <= 1e-12 * shared {
            fit
        } else {
            let cells = (fit.span * shared).ceil() as usize;
            if cells > 8 * opts.max_cells {
                return Err(Error::Numeric(format!(
                    "re-binning pair {from}->{to} at shared rate {shared:.3e} \
                     needs {cells} cells"
                )));
            }
            let branches = binned_branches(&target.law, shared, cells);
            let distance = law_distance(&target.law, shared, &branches, opts.dual_cells);
            if distance > opts.eps {
                return Err(Error::Numeric(format!(
                    "re-binned pair {from}->{to} misses tolerance: d_w={distance:.3e}"
                )));
            }
            FittedLaw { rate: shared, span: fit.span, distance, cells, branches }
        };
        pairs.push(PairApprox {
            from,
            to,
            mass,
            rate: fit.rate,
            span: fit.span,
            distance: fit.distance,
            branches: fit.branches,
        });
    }
    PhaseTypeModel::new(labels, pairs)
}

// ---------------------------------------------------------------------------
// network realization

/// Explicit chain-network realization of a [`PhaseTypeModel`]: state 0..R
/// are compartment roots, then chain states, then (if any compartment
/// routes less than unit mass) one absorbing overflow state.
#[derive(Debug, Clone)]
pub struct BuiltNetwork {
    labels: Vec<String>,
    n_states: usize,
    roots: Vec<u32>,
    sink: Option<u32>,
    spans: Vec<(u32, u32)>,
    edges: Vec<(u32, u32, f64)>,
}

/// Realize the model as an explicit network. Each branch of shape `m`
/// becomes the root stage plus `m - 1` chain states, all at the shared
/// rate; the defect `1 - sum mass` drains into an absorbing state.
pub fn build_network(model: &PhaseTypeModel) -> Result<BuiltNetwork> {
    let n_comp = model.labels().len();
    let roots: Vec<u32> = (0..n_comp as u32).collect();
    let mut spans: Vec<(u32, u32)> = Vec::with_capacity(n_comp);
    let mut next = n_comp as u32;
    let mut edges: Vec<(u32, u32, f64)> = Vec::new();
    let mut defect = vec![0.0f64; n_comp];
    for alpha in 0..n_comp {
        let rate = match model.rate_of(alpha) {
            Some(r) => r,
            None => {
                spans.push((next, next));
                continue;
            }
        };
        // chain states of one compartment are allocated contiguously
        let start = next;
        let mut routed = 0.0;
        for p in model.pairs().iter().filter(|p| p.from == alpha) {
            for b in &p.branches {
                let prob = p.mass * b.weight;
                routed += prob;
                if b.shape == 1 {
                    edges.push((roots[alpha], roots[p.to], rate * prob));
                    continue;
                }
                let hops = b.shape - 1;
                edges.push((roots[alpha], next, rate * prob));
                for k in 0..hops {
                    let here = next;
                    next += 1;
                    let dest = if k + 1 == hops { roots[p.to] } else { next };
                    edges.push((here, dest, rate));
                }
            }
        }
        spans.push((start, next));
        defect[alpha] = (1.0 - routed).max(0.0);
    }
    let needs_sink = defect
        .iter()
        .enumerate()
        .any(|(alpha, d)| model.rate_of(alpha).is_some() && *d > 1e-12);
    let sink = if needs_sink {
        let s = next;
        next += 1;
        for (alpha, d) in defect.iter().enumerate() {
            if let Some(rate) = model.rate_of(alpha) {
                if *d > 1e-12 {
                    edges.push((roots[alpha], s, rate * d));
                }
            }
        }
        Some(s)
    } else {
        None
    };
    Ok(BuiltNetwork {
        labels: model.labels().to_vec(),
        n_states: next as usize,
        roots,
        sink,
        spans,
        edges,
    })
}

impl BuiltNetwork {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn edges(&self) -> &[(u32, u32, f64)] {
        &self.edges
    }

    pub fn roots(&self) -> &[u32] {
        &self.roots
    }

    pub fn sink(&self) -> Option<u32> {
        self.sink
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Chain-state range `(lo, hi)` of a compartment, empty when it has
    /// no multi-stage branches; the root itself is state `alpha`.
    pub fn chain_span(&self, alpha: usize) -> (u32, u32) {
        self.spans[alpha]
    }

    /// Human-readable state name, computed on demand (state lists can be
    /// large).
    pub fn state_name(&self, state: u32) -> String {
        if (state as usize) < self.labels.len() {
            return self.labels[state as usize].clone();
        }
        if self.sink == Some(state) {
            return "overflow".into();
        }
        format!("stage{state}")
    }

    /// Densify into a [`ReactionNetwork`]; refused past
    /// a state-count guard because the dense generator is quadratic.
    pub fn to_network(&self) -> Result<ReactionNetwork> {
        if self.n_states > MAX_DENSE_STATES {
            return Err(Error::Unsupported(format!(
                "{} states is too large to densify (limit {MAX_DENSE_STATES}); \
                 use the structural verifier instead",
                self.n_states
            )));
        }
        let states: Vec<String> = (0..self.n_states as u32).map(|s| self.state_name(s)).collect();
        let entries: Vec<RateEntry> = self
            .edges
            .iter()
            .map(|(f, t, r)| RateEntry {
                from: states[*f as usize].clone(),
                to: states[*t as usize].clone(),
                rate: *r,
            })
            .collect();
        ReactionNetwork::new(states, &entries)
    }

    /// Densify and partition: each compartment is its root plus its chain
    /// states; the overflow state (if present) is its own compartment.
    pub fn to_system(&self) -> Result<CompartmentSystem> {
        let network = self.to_network()?;
        let mut partition: Vec<Vec<usize>> = Vec::new();
        for (alpha, &root) in self.roots.iter().enumerate() {
            let mut members = vec![root as usize];
            let (lo, hi) = self.spans[alpha];
            members.extend((lo..hi).map(|s| s as usize));
            partition.push(members);
        }
        if let Some(s) = self.sink {
            partition.push(vec![s as usize]);
        }
        CompartmentSystem::new(network, partition)
    }
}

// ---------------------------------------------------------------------------
// verification

/// Per-pair comparison of the rebuilt network against its target.
#[derive(Debug, Clone)]
pub struct PairReport {
    pub from: usize,
    pub to: usize,
    pub mass_target: f64,
    pub mass_recovered: f64,
    pub rate: f64,
    pub distance: f64,
}

#[derive(Debug, Clone)]
pub struct VerificationReport {
    /// Which distance the numbers are in.
    pub metric: &'static str,
    pub pairs: Vec<PairReport>,
    pub total_distance: f64,
}

/// Re-reduce a built network structurally — walk each chain from the
/// roots, recover the realized Erlang mixtures exactly, and compare them
/// to the stated targets in mass and bounded-Lipschitz distance. This is
/// the faithful reduction of a chain network (each branch is a pure
/// sequence of identical stages), so no dense linear algebra is needed.
pub fn verify_approximation(
    net: &BuiltNetwork,
    targets: &[ApproxTarget],
    dual_cells: usize,
) -> Result<VerificationReport> {
    let n = net.n_states();
    let mut order: Vec<usize> = (0..net.edges.len()).collect();
    order.sort_by_key(|&i| net.edges[i].0);
    let mut offsets = vec![0usize; n + 1];
    for &i in &order {
        offsets[net.edges[i].0 as usize + 1] += 1;
    }
    for s in 0..n {
        offsets[s + 1] += offsets[s];
    }
    let out_of = |s: u32| -> &[usize] { &order[offsets[s as usize]..offsets[s as usize + 1]] };

    let n_comp = net.labels().len();
    let mut recovered: BTreeMap<(usize, usize), (f64, Vec<Branch>)> = BTreeMap::new();
    for (alpha, &root) in net.roots().iter().enumerate() {
        let outs = out_of(root);
        if outs.is_empty() {
            continue;
        }
        let total_rate: f64 = outs.iter().map(|&i| net.edges[i].2).sum();
        for &i in outs {
            let (_, mut here, rate) = net.edges[i];
            let prob = rate / total_rate;
            let mut shape = 1u32;
            loop {
                if net.sink() == Some(here) {
                    shape = 0; // defect branch, not a pair
                    break;
                }
                if (here as usize) < n_comp {
                    break;
                }
                let hops = out_of(here);
                if hops.len() != 1 {
                    return Err(Error::InvalidNetwork(format!(
                        "chain state {here} has {} exits; not a chain realization",
                        hops.len()
                    )));
                }
                let (_, next, r) = net.edges[hops[0]];
                if (r - total_rate).abs() > 1e-9 * total_rate {
                    return Err(Error::InvalidNetwork(format!(
                        "chain state {here} hops at rate {r}, root exits at {total_rate}"
                    )));
                }
                here = next;
                shape += 1;
            }
            if shape == 0 {
                continue;
            }
            let entry = recovered
                .entry((alpha, here as usize))
                .or_insert_with(|| (total_rate, Vec::new()));
            entry.1.push(Branch { weight: prob, shape });
        }
    }

    let mut pairs = Vec::new();
    let mut total_distance = 0.0;
    for t in targets {
        let (rate, mut branches) = recovered
            .remove(&(t.from, t.to))
            .ok_or_else(|| {
                Error::InvalidNetwork(format!(
                    "network realizes no path for pair {} -> {}",
                    t.from, t.to
                ))
            })?;
        branches.sort_by_key(|b| b.shape);
        let mass_recovered: f64 = branches.iter().map(|b| b.weight).sum();
        let mut conditional = branches.clone();
        if mass_recovered > 0.0 {
            for b in &mut conditional {
                b.weight /= mass_recovered;
            }
        }
        let distance = law_distance(&t.law, rate, &conditional, dual_cells);
        total_distance += distance;
        pairs.push(PairReport {
            from: t.from,
            to: t.to,
            mass_target: t.mass,
            mass_recovered,
            rate,
            distance,
        });
    }
    Ok(VerificationReport { metric: METRIC_NAME, pairs, total_distance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{compute_kernels, reduce_one_entrance};
    use crate::numeric::max_abs_diff;

    #[test]
    fn point_mass_separation_matches_the_closed_form() {
        // atoms at 0 and d: sup over ||f||_inf + Lip <= 1 is 2d/(2+d)
        for (idx, cells, h) in [(64usize, 129usize, 1.0 / 64.0), (64, 129, 1.0 / 32.0)] {
            let d = idx as f64 * h;
            let mut mu = vec![0.0; cells];
            let mut nu = vec![0.0; cells];
            mu[0] = 1.0;
            nu[idx] = 1.0;
            let got = bounded_lipschitz_discrete(&mu, &nu, h);
            let want = 2.0 * d / (2.0 + d);
            assert!(
                (got - want).abs() < 1e-9,
                "separation {d}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn distance_is_zero_on_equal_measures_and_below_w1() {
        let mut mu = vec![0.0; 200];
        let mut nu = vec![0.0; 200];
        let mut seed = 0.37f64;
        for i in 0..200 {
            seed = (seed * 997.13 + 0.71).fract();
            mu[i] = seed;
            seed = (seed * 613.37 + 0.29).fract();
            nu[i] = seed;
        }
        let ms: f64 = mu.iter().sum();
        let ns: f64 = nu.iter().sum();
        mu.iter_mut().for_each(|v| *v /= ms);
        nu.iter_mut().for_each(|v| *v /= ns);
        let h = 0.02;
        assert!(bounded_lipschitz_discrete(&mu, &mu, h).abs() < 1e-12);
        let d = bounded_lipschitz_discrete(&mu, &nu, h);
        let w1 = w1_upper_discrete(&mu, &nu, h);
        assert!(d <= w1 + 1e-12, "d_w {d} must not exceed W1 {w1}");
        assert!(d > 0.0);
    }

    #[test]
    fn erlang_evaluators_are_consistent() {
        let branches = vec![
            Branch { weight: 0.25, shape: 1 },
            Branch { weight: 0.5, shape: 7 },
            Branch { weight: 0.25, shape: 40 },
        ];
        let mass = mixture_mass_quadrature(3.0, &branches, 8192);
        // trapezoid error ~ (rate*h)^2/12 on the exponential branch
        assert!((mass - 1.0).abs() < 1e-5, "mass {mass}");
        // CDF matches a brute-force series at a few points
        let xs = [0.5, 2.0, 10.0, 20.0];
        let got = mixture_cdf(3.0, &branches, &xs);
        for (&x, &g) in xs.iter().zip(&got) {
            let want: f64 = branches
                .iter()
                .map(|b| b.weight * erlang_cdf(b.shape, 3.0, x))
                .sum();
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_erlang_target_fits_immediately_at_its_own_scale() {
        let law = TargetMeasure::erlang(3, 2.0).unwrap();
        let fit = fit_single(&law, &FitOptions::new(0.2)).unwrap();
        assert!(fit.distance <= 0.2);
        // the binned mixture keeps the mean near 1.5
        let mean: f64 = fit
            .branches
            .iter()
            .map(|b| b.weight * b.shape as f64 / fit.rate)
            .sum();
        assert!((mean - 1.5).abs() < 0.2, "mean {mean}");
    }

    #[test]
    fn refining_the_binning_improves_the_distance() {
        let law = TargetMeasure::uniform(1.0, 2.0).unwrap();
        let span = law.quantile(0.999);
        let coarse = binned_branches(&law, 64.0 / span, 64);
        let fine = binned_branches(&law, 128.0 / span, 128);
        let d1 = law_distance(&law, 64.0 / span, &coarse, 1024);
        let d2 = law_distance(&law, 128.0 / span, &fine, 1024);
        assert!(d2 <= d1 * 1.1, "doubling cells: {d1} -> {d2}");
    }

    #[test]
    fn chain_realization_reproduces_the_erlang_kernel_densely() {
        // forward pair: shape 3, rate 2 -> the rebuilt network must re-reduce
        // to the Erlang(3, 2) density 4 t^2 e^{-2t}. The reverse pair gives
        // "left" an entrance, otherwise the reduction has no arrival to
        // condition on and emits no kernels out of it.
        let model = PhaseTypeModel::new(
            vec!["left".into(), "right".into()],
            vec![
                PairApprox {
                    from: 0,
                    to: 1,
                    mass: 1.0,
                    rate: 2.0,
                    span: 5.0,
                    distance: 0.0,
                    branches: vec![Branch { weight: 1.0, shape: 3 }],
                },
                PairApprox {
                    from: 1,
                    to: 0,
                    mass: 1.0,
                    rate: 2.0,
                    span: 5.0,
                    distance: 0.0,
                    branches: vec![Branch { weight: 1.0, shape: 1 }],
                },
            ],
        )
        .unwrap();
        let net = build_network(&model).unwrap();
        assert_eq!(net.n_states(), 4);
        assert_eq!(net.sink(), None);
        let system = net.to_system().unwrap();
        let grid = TimeGrid::new(6.0, 1e-3).unwrap();
        let kernels = compute_kernels(&system, &grid).unwrap();
        let scalar = reduce_one_entrance(&kernels, &system).unwrap();
        let phi = scalar.phi(0, 1).unwrap();
        let want = grid.sample(|t| 4.0 * t * t * (-2.0 * t).exp());
        assert!(max_abs_diff(phi, &want) < 1e-9);
        let back = scalar.phi(1, 0).unwrap();
        let want_back = grid.sample(|t| 2.0 * (-2.0 * t).exp());
        assert!(max_abs_diff(back, &want_back) < 1e-9);
    }

    #[test]
    fn structural_verification_recovers_masses_and_distance() {
        let law = TargetMeasure::uniform(1.0, 2.0).unwrap();
        let fit = fit_single(&law, &FitOptions::new(0.35)).unwrap();
        let targets = vec![ApproxTarget { from: 0, to: 1, mass: 0.8, law }];
        let model = fit_targets(
            vec!["a".into(), "b".into()],
            &targets,
            &FitOptions::new(0.35),
        )
        .unwrap();
        let net = build_network(&model).unwrap();
        // defect 0.2 must be drained by an absorbing state
        assert!(net.sink().is_some());
        let report = verify_approximation(&net, &targets, 1024).unwrap();
        assert_eq!(report.pairs.len(), 1);
        let p = &report.pairs[0];
        assert!((p.mass_recovered - 0.8).abs() < 1e-9);
        assert!(p.distance <= 0.35 + 0.02, "distance {}", p.distance);
        assert_eq!(report.metric, METRIC_NAME);
        let _ = fit.cells;
    }

    #[test]
    fn shared_root_rate_is_enforced_across_pairs() {
        let fast = TargetMeasure::erlang(2, 8.0).unwrap();
        let slow = TargetMeasure::erlang(2, 0.5).unwrap();
        let targets = vec![
            ApproxTarget { from: 0, to: 1, mass: 0.5, law: fast },
            ApproxTarget { from: 0, to: 2, mass: 0.5, law: slow },
        ];
        let model = fit_targets(
            vec!["hub".into(), "x".into(), "y".into()],
            &targets,
            &FitOptions::new(0.3),
        )
        .unwrap();
        let r01 = model.pair(0, 1).unwrap().rate;
        let r02 = model.pair(0, 2).unwrap().rate;
        assert!((r01 - r02).abs() < 1e-9 * r01);
        let net = build_network(&model).unwrap();
        let report = verify_approximation(&net, &targets, 1024).unwrap();
        for p in &report.pairs {
            assert!((p.mass_recovered - 0.5).abs() < 1e-9);
            assert!(p.distance <= 0.3 + 0.02);
        }
    }

    #[test]
    fn dense_guard_refuses_oversized_networks() {
        let branches: Vec<Branch> = (1..=80)
            .map(|j| Branch { weight: 1.0 / 80.0, shape: j * 40 })
            .collect();
        let model = PhaseTypeModel::new(
            vec!["a".into(), "b".into()],
            vec![PairApprox {
                from: 0,
                to: 1,
                mass: 1.0,
                rate: 40.0,
                span: 24.0,
                distance: 0.0,
                branches,
            }],
        )
        .unwrap();
        let net = build_network(&model).unwrap();
        assert!(net.n_states() > MAX_DENSE_STATES);
        assert!(matches!(net.to_network(), Err(Error::Unsupported(_))));
    }
}
