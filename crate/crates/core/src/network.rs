//! Linear reaction networks, compartment decompositions, and detailed balance.
//!
//! A network is a first-order rate system `dn/dt = A n` where `A[(i, j)]` for
//! `i != j` is the rate of the reaction `j -> i` and every column of `A` sums
//! to zero (mass is conserved; degradation must be modelled as an explicit
//! waste state). A compartment decomposition groups the states into two or
//! more disjoint blocks; everything downstream (kernels, renewal equations,
//! age-structured densities) is expressed per block.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One directed reaction `from -> to` at a positive rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEntry {
    pub from: String,
    pub to: String,
    pub rate: f64,
}

#[derive(Debug, Clone)]
pub struct ReactionNetwork {
    states: Vec<String>,
    a: DMatrix<f64>,
}

impl ReactionNetwork {
    pub fn new(states: Vec<String>, rates: &[RateEntry]) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidNetwork("no states".into()));
        }
        let mut index = BTreeMap::new();
        for (i, name) in states.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::InvalidNetwork("empty state name".into()));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::InvalidNetwork(format!("duplicate state name '{name}'")));
            }
        }
        let n = states.len();
        let mut a = DMatrix::zeros(n, n);
        let mut seen = std::collections::BTreeSet::new();
        for r in rates {
            let &from = index
                .get(&r.from)
                .ok_or_else(|| Error::InvalidNetwork(format!("unknown state '{}'", r.from)))?;
            let &to = index
                .get(&r.to)
                .ok_or_else(|| Error::InvalidNetwork(format!("unknown state '{}'", r.to)))?;
            if from == to {
                return Err(Error::InvalidNetwork(format!(
                    "self-loop on '{}' is not a reaction",
                    r.from
                )));
            }
            if !r.rate.is_finite() || r.rate < 0.0 {
                return Err(Error::InvalidNetwork(format!(
                    "rate {} -> {} must be finite and nonnegative, got {}",
                    r.from, r.to, r.rate
                )));
            }
            if !seen.insert((from, to)) {
                return Err(Error::InvalidNetwork(format!(
                    "duplicate rate entry {} -> {}",
                    r.from, r.to
                )));
            }
            a[(to, from)] = r.rate;
        }
        for j in 0..n {
            let col_sum: f64 = (0..n).filter(|&i| i != j).map(|i| a[(i, j)]).sum();
            a[(j, j)] = -col_sum;
        }
        Ok(ReactionNetwork { states, a })
    }

    /// Build from an explicit generator matrix (`a[(i, j)]` = rate `j -> i`).
    pub fn from_matrix(states: Vec<String>, a: DMatrix<f64>) -> Result<Self> {
        let n = states.len();
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::InvalidNetwork(format!(
                "matrix is {}x{} but there are {} states",
                a.nrows(),
                a.ncols(),
                n
            )));
        }
        let scale = a.amax().max(1.0);
        for j in 0..n {
            let mut col_sum = 0.0;
            for i in 0..n {
                let v = a[(i, j)];
                if !v.is_finite() {
                    return Err(Error::InvalidNetwork("non-finite rate".into()));
                }
                if i != j && v < 0.0 {
                    return Err(Error::InvalidNetwork(format!(
                        "negative off-diagonal rate at ({i}, {j})"
                    )));
                }
                col_sum += v;
            }
            if col_sum.abs() > 1e-9 * scale {
                return Err(Error::InvalidNetwork(format!(
                    "column {j} sums to {col_sum}, generator must conserve mass"
                )));
            }
        }
        // re-derive names duplicates check through the main constructor path
        let mut uniq = std::collections::BTreeSet::new();
        for s in &states {
            if !uniq.insert(s.clone()) {
                return Err(Error::InvalidNetwork(format!("duplicate state name '{s}'")));
            }
        }
        Ok(ReactionNetwork { states, a })
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s == name)
    }

    /// Rate of `from -> to` (zero when absent).
    pub fn rate(&self, from: usize, to: usize) -> f64 {
        if from == to {
            0.0
        } else {
            self.a[(to, from)]
        }
    }

    /// All present reactions as `(from, to, rate)` with positive rate.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n_states();
        let mut out = Vec::new();
        for from in 0..n {
            for to in 0..n {
                if to != from && self.a[(to, from)] > 0.0 {
                    out.push((from, to, self.a[(to, from)]));
                }
            }
        }
        out
    }

    pub fn rate_entries(&self) -> Vec<RateEntry> {
        self.edges()
            .into_iter()
            .map(|(f, t, r)| RateEntry {
                from: self.states[f].clone(),
                to: self.states[t].clone(),
                rate: r,
            })
            .collect()
    }
}

/// Which states of a compartment receive mass from outside.
#[derive(Debug, Clone, PartialEq)]
pub enum EntranceVerdict {
    /// No inbound edges; the compartment only drains (or is inert).
    None,
    /// Exactly one receiving state (global index).
    Unique(usize),
    /// Several receiving states; the scalar reduction does not apply.
    Multiple(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct CompartmentSystem {
    network: ReactionNetwork,
    partition: Vec<Vec<usize>>,
    comp_of: Vec<usize>,
}

impl CompartmentSystem {
    pub fn new(network: ReactionNetwork, partition: Vec<Vec<usize>>) -> Result<Self> {
        let n = network.n_states();
        if partition.len() < 2 {
            return Err(Error::InvalidPartition(
                "need at least two compartments".into(),
            ));
        }
        let mut comp_of = vec![usize::MAX; n];
        for (alpha, block) in partition.iter().enumerate() {
            if block.is_empty() {
                return Err(Error::InvalidPartition(format!("compartment {alpha} is empty")));
            }
            for &s in block {
                if s >= n {
                    return Err(Error::InvalidPartition(format!(
                        "state index {s} out of range in compartment {alpha}"
                    )));
                }
                if comp_of[s] != usize::MAX {
                    return Err(Error::InvalidPartition(format!(
                        "state '{}' appears in two compartments",
                        network.states()[s]
                    )));
                }
                comp_of[s] = alpha;
            }
        }
        if let Some(s) = comp_of.iter().position(|&c| c == usize::MAX) {
            return Err(Error::InvalidPartition(format!(
                "state '{}' is not assigned to any compartment",
                network.states()[s]
            )));
        }
        Ok(CompartmentSystem {
            network,
            partition,
            comp_of,
        })
    }

    /// Resolve a partition given by state names.
    pub fn from_names(network: ReactionNetwork, blocks: &[Vec<String>]) -> Result<Self> {
        let mut partition = Vec::with_capacity(blocks.len());
        for block in blocks {
            let mut ids = Vec::with_capacity(block.len());
            for name in block {
                let id = network
                    .index_of(name)
                    .ok_or_else(|| Error::InvalidPartition(format!("unknown state '{name}'")))?;
                ids.push(id);
            }
            partition.push(ids);
        }
        Self::new(network, partition)
    }

    pub fn network(&self) -> &ReactionNetwork {
        &self.network
    }

    pub fn n_compartments(&self) -> usize {
        self.partition.len()
    }

    pub fn size(&self, alpha: usize) -> usize {
        self.partition[alpha].len()
    }

    /// Global state indices of compartment `alpha`, in declaration order.
    pub fn states_of(&self, alpha: usize) -> &[usize] {
        &self.partition[alpha]
    }

    pub fn compartment_of(&self, state: usize) -> usize {
        self.comp_of[state]
    }

    /// Position of a global state inside its compartment's local ordering.
    pub fn local_index(&self, state: usize) -> usize {
        let alpha = self.comp_of[state];
        self.partition[alpha]
            .iter()
            .position(|&s| s == state)
            .expect("state listed in its own compartment")
    }

    /// Compartment names: a singleton borrows its state's name, larger
    /// blocks join member names with `+`.
    pub fn labels(&self) -> Vec<String> {
        self.partition
            .iter()
            .map(|members| {
                members
                    .iter()
                    .map(|&s| self.network.states()[s].as_str())
                    .collect::<Vec<_>>()
                    .join("+")
            })
            .collect()
    }

    /// Sub-generator block: rows from compartment `alpha`, columns from `beta`.
    /// The diagonal block (`alpha == beta`) keeps the full diagonal, so its
    /// column deficits are exactly the exit rates out of the compartment.
    pub fn block(&self, alpha: usize, beta: usize) -> DMatrix<f64> {
        let rows = &self.partition[alpha];
        let cols = &self.partition[beta];
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
            self.network.matrix()[(rows[i], cols[j])]
        })
    }

    /// Per-state total exit rate out of compartment `alpha`
    /// (diagonal of the loss matrix; equals the column deficit of the
    /// diagonal block).
    pub fn exit_rates(&self, alpha: usize) -> DVector<f64> {
        let block = self.block(alpha, alpha);
        DVector::from_fn(block.ncols(), |j, _| -block.column(j).sum())
    }

    /// True when some state of `beta` feeds some state of `alpha` directly.
    pub fn feeds(&self, beta: usize, alpha: usize) -> bool {
        if alpha == beta {
            return false;
        }
        self.partition[alpha].iter().any(|&i| {
            self.partition[beta]
                .iter()
                .any(|&j| self.network.matrix()[(i, j)] > 0.0)
        })
    }

    pub fn entrance_verdict(&self, alpha: usize) -> EntranceVerdict {
        let mut hits = Vec::new();
        for &i in &self.partition[alpha] {
            let receives = (0..self.network.n_states())
                .any(|j| self.comp_of[j] != alpha && self.network.matrix()[(i, j)] > 0.0);
            if receives {
                hits.push(i);
            }
        }
        match hits.len() {
            0 => EntranceVerdict::None,
            1 => EntranceVerdict::Unique(hits[0]),
            _ => EntranceVerdict::Multiple(hits),
        }
    }

    pub fn entrance_verdicts(&self) -> Vec<EntranceVerdict> {
        (0..self.n_compartments())
            .map(|a| self.entrance_verdict(a))
            .collect()
    }

    /// Entrance state per compartment (`None` when nothing flows in), or an
    /// error naming the first compartment with several entrance states.
    pub fn scalar_entrances(&self) -> Result<Vec<Option<usize>>> {
        let mut out = Vec::with_capacity(self.n_compartments());
        for alpha in 0..self.n_compartments() {
            match self.entrance_verdict(alpha) {
                EntranceVerdict::None => out.push(None),
                EntranceVerdict::Unique(i) => out.push(Some(i)),
                EntranceVerdict::Multiple(states) => {
                    let names: Vec<&str> = states
                        .iter()
                        .map(|&s| self.network.states()[s].as_str())
                        .collect();
                    return Err(Error::Unsupported(format!(
                        "compartment {alpha} has {} entrance states ({}); the scalar \
                         reduction needs a unique entrance",
                        names.len(),
                        names.join(", ")
                    )));
                }
            }
        }
        Ok(out)
    }

    /// Split an initial global state vector into per-compartment pieces.
    pub fn split_state(&self, n0: &DVector<f64>) -> Vec<DVector<f64>> {
        self.partition
            .iter()
            .map(|block| DVector::from_fn(block.len(), |i, _| n0[block[i]]))
            .collect()
    }

    /// Total initial mass per compartment.
    pub fn compartment_totals(&self, n0: &DVector<f64>) -> Vec<f64> {
        self.partition
            .iter()
            .map(|block| block.iter().map(|&s| n0[s]).sum())
            .collect()
    }
}

/// Outcome of looking for a reversible stationary distribution.
///
/// `stationary` is the (unique, normalized) null vector of the generator;
/// `residual` is the largest pairwise net stationary flux
/// `|rate(i->j)·mu_i − rate(j->i)·mu_j|`. The certificate is granted when the
/// residual does not exceed the tolerance it was computed with.
#[derive(Debug, Clone)]
pub struct DetailedBalanceCertificate {
    stationary: DVector<f64>,
    residual: f64,
    tol: f64,
}

impl DetailedBalanceCertificate {
    pub fn stationary(&self) -> &DVector<f64> {
        &self.stationary
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn is_certified(&self) -> bool {
        self.residual <= self.tol
    }

    /// The reversible measure, present only when certified.
    pub fn mu(&self) -> Option<&DVector<f64>> {
        self.is_certified().then_some(&self.stationary)
    }
}

/// Compute the stationary distribution and test pairwise flux balance.
pub fn detect_detailed_balance(
    network: &ReactionNetwork,
    tol: f64,
) -> Result<DetailedBalanceCertificate> {
    let a = network.matrix();
    let n = network.n_states();
    if n < 2 {
        return Err(Error::InvalidNetwork(
            "detailed balance needs at least two states".into(),
        ));
    }
    let svd = a.clone().svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let scale = sv[0].max(1e-300);
    if n >= 2 && sv[n - 2] <= 1e-10 * scale {
        return Err(Error::InvalidNetwork(
            "stationary distribution is not unique (network is not connected)".into(),
        ));
    }
    let v_t = svd
        .v_t
        .as_ref()
        .ok_or_else(|| Error::Numeric("SVD did not return singular vectors".into()))?;
    // singular values are in descending order; null vector pairs with the last
    let mut mu = DVector::from_fn(n, |i, _| v_t[(n - 1, i)]);
    let total: f64 = mu.iter().sum();
    if total < 0.0 {
        mu = -mu;
    }
    let total = total.abs();
    if total < 1e-12 {
        return Err(Error::Numeric(
            "stationary vector has vanishing total mass".into(),
        ));
    }
    mu /= total;
    if mu.iter().any(|&x| x < 1e-12) {
        return Err(Error::InvalidNetwork(
            "stationary distribution is not strictly positive".into(),
        ));
    }
    let mut residual = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let flux_ij = network.rate(i, j) * mu[i];
            let flux_ji = network.rate(j, i) * mu[j];
            residual = residual.max((flux_ij - flux_ji).abs());
        }
    }
    Ok(DetailedBalanceCertificate {
        stationary: mu,
        residual,
        tol,
    })
}

/// Random strongly connected conservative network: a directed ring plus
/// `extra_edges` random chords, rates uniform in `[rate_lo, rate_hi]`.
pub fn random_connected_network(
    rng: &mut impl Rng,
    n: usize,
    extra_edges: usize,
    rate_lo: f64,
    rate_hi: f64,
) -> ReactionNetwork {
    assert!(n >= 2);
    let states: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let mut entries = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..n {
        let j = (i + 1) % n;
        seen.insert((i, j));
        entries.push(RateEntry {
            from: states[i].clone(),
            to: states[j].clone(),
            rate: rng.gen_range(rate_lo..rate_hi),
        });
    }
    let mut added = 0;
    let mut guard = 0;
    while added < extra_edges && guard < 100 * extra_edges + 100 {
        guard += 1;
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if i == j || seen.contains(&(i, j)) {
            continue;
        }
        seen.insert((i, j));
        entries.push(RateEntry {
            from: states[i].clone(),
            to: states[j].clone(),
            rate: rng.gen_range(rate_lo..rate_hi),
        });
        added += 1;
    }
    ReactionNetwork::new(states, &entries).expect("construction is valid by design")
}

/// Random partition of `n` states into `blocks` nonempty compartments.
pub fn random_partition(rng: &mut impl Rng, n: usize, blocks: usize) -> Vec<Vec<usize>> {
    assert!(blocks >= 2 && blocks <= n);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    let mut partition: Vec<Vec<usize>> = (0..blocks).map(|b| vec![ids[b]]).collect();
    for &s in &ids[blocks..] {
        partition[rng.gen_range(0..blocks)].push(s);
    }
    for block in &mut partition {
        block.sort_unstable();
    }
    partition
}

/// Random six-state reversible network split into two compartments that talk
/// through the single state pair (2, 3). Built as `A = M S M^{-1}` with `M =
/// diag(sqrt(mu))` and `S` symmetric, so pairwise balance holds exactly; the
/// bridge states are simultaneously the unique entrance and the unique exit
/// origin of their compartments.
pub fn random_detailed_balance_pair(rng: &mut impl Rng) -> (ReactionNetwork, Vec<Vec<usize>>) {
    let n = 6;
    let mu: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
    // symmetric coupling pattern: paths 0-1-2 and 3-4-5, chords 0-2 / 3-5, bridge 2-3
    let mut pairs = vec![(0, 1), (1, 2), (3, 4), (4, 5), (2, 3)];
    if rng.gen_bool(0.5) {
        pairs.push((0, 2));
    }
    if rng.gen_bool(0.5) {
        pairs.push((3, 5));
    }
    let mut a = DMatrix::zeros(n, n);
    for &(i, j) in &pairs {
        let s = rng.gen_range(0.3..1.5);
        a[(i, j)] = s * (mu[i] / mu[j]).sqrt();
        a[(j, i)] = s * (mu[j] / mu[i]).sqrt();
    }
    for j in 0..n {
        let col_sum: f64 = (0..n).filter(|&i| i != j).map(|i| a[(i, j)]).sum();
        a[(j, j)] = -col_sum;
    }
    let states: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let net = ReactionNetwork::from_matrix(states, a).expect("valid by construction");
    (net, vec![vec![0, 1, 2], vec![3, 4, 5]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_state() -> ReactionNetwork {
        ReactionNetwork::new(
            vec!["a".into(), "b".into()],
            &[
                RateEntry {
                    from: "a".into(),
                    to: "b".into(),
                    rate: 2.0,
                },
                RateEntry {
                    from: "b".into(),
                    to: "a".into(),
                    rate: 1.0,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn generator_columns_sum_to_zero() {
        let net = two_state();
        let a = net.matrix();
        assert_relative_eq!(a[(1, 0)], 2.0);
        assert_relative_eq!(a[(0, 1)], 1.0);
        assert_relative_eq!(a[(0, 0)], -2.0);
        assert_relative_eq!(a[(1, 1)], -1.0);
    }

    #[test]
    fn rejects_bad_rates_and_names() {
        let states = vec!["a".to_string(), "b".to_string()];
        let mk = |from: &str, to: &str, rate: f64| RateEntry {
            from: from.into(),
            to: to.into(),
            rate,
        };
        assert!(ReactionNetwork::new(states.clone(), &[mk("a", "a", 1.0)]).is_err());
        assert!(ReactionNetwork::new(states.clone(), &[mk("a", "c", 1.0)]).is_err());
        assert!(ReactionNetwork::new(states.clone(), &[mk("a", "b", -1.0)]).is_err());
        assert!(
            ReactionNetwork::new(states.clone(), &[mk("a", "b", 1.0), mk("a", "b", 2.0)]).is_err()
        );
        assert!(ReactionNetwork::new(vec!["a".into(), "a".into()], &[]).is_err());
    }

    #[test]
    fn two_state_stationary_distribution_and_certificate() {
        // rates a->b: 2, b->a: 1 give mu = (1/3, 2/3), exactly balanced
        let cert = detect_detailed_balance(&two_state(), 1e-8).unwrap();
        assert_relative_eq!(cert.stationary()[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(cert.stationary()[1], 2.0 / 3.0, epsilon = 1e-12);
        assert!(cert.residual() < 1e-12);
        assert!(cert.is_certified());
        assert!(cert.mu().is_some());
    }

    #[test]
    fn directed_three_cycle_has_uniform_law_but_residual_one_third() {
        let states: Vec<String> = vec!["x".into(), "y".into(), "z".into()];
        let entries = [("x", "y"), ("y", "z"), ("z", "x")].map(|(f, t)| RateEntry {
            from: f.into(),
            to: t.into(),
            rate: 1.0,
        });
        let net = ReactionNetwork::new(states, &entries).unwrap();
        let cert = detect_detailed_balance(&net, 1e-8).unwrap();
        for i in 0..3 {
            assert_relative_eq!(cert.stationary()[i], 1.0 / 3.0, epsilon = 1e-10);
        }
        // one-way edges carry stationary flux 1/3 with nothing coming back
        assert_relative_eq!(cert.residual(), 1.0 / 3.0, epsilon = 1e-10);
        assert!(!cert.is_certified());
        assert!(cert.mu().is_none());
    }

    #[test]
    fn disconnected_network_is_rejected() {
        let states: Vec<String> = vec!["a".into(), "b".into(), "c".into(), "d".into()];
        let entries = [("a", "b"), ("b", "a"), ("c", "d"), ("d", "c")].map(|(f, t)| RateEntry {
            from: f.into(),
            to: t.into(),
            rate: 1.0,
        });
        let net = ReactionNetwork::new(states, &entries).unwrap();
        assert!(detect_detailed_balance(&net, 1e-8).is_err());
    }

    #[test]
    fn partition_validation_catches_overlap_gap_and_empty() {
        let net = two_state();
        assert!(CompartmentSystem::new(net.clone(), vec![vec![0], vec![0]]).is_err());
        assert!(CompartmentSystem::new(net.clone(), vec![vec![0], vec![]]).is_err());
        assert!(CompartmentSystem::new(net.clone(), vec![vec![0, 1]]).is_err());
        assert!(CompartmentSystem::new(net.clone(), vec![vec![0], vec![1, 2]]).is_err());
        assert!(CompartmentSystem::new(net, vec![vec![0], vec![1]]).is_ok());
    }

    #[test]
    fn blocks_and_exit_rates_of_a_chain() {
        // a -> b -> c -> d, unit rates; compartments {a, b} and {c, d}
        let states: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let entries = [("a", "b"), ("b", "c"), ("c", "d")].map(|(f, t)| RateEntry {
            from: f.into(),
            to: t.into(),
            rate: 1.0,
        });
        let net = ReactionNetwork::new(states, &entries).unwrap();
        let sys = CompartmentSystem::new(net, vec![vec![0, 1], vec![2, 3]]).unwrap();

        let diag = sys.block(0, 0);
        assert_relative_eq!(diag[(0, 0)], -1.0);
        assert_relative_eq!(diag[(1, 0)], 1.0);
        assert_relative_eq!(diag[(1, 1)], -1.0);

        let exits = sys.exit_rates(0);
        assert_relative_eq!(exits[0], 0.0); // a only moves inside the block
        assert_relative_eq!(exits[1], 1.0); // b exits to c

        let cross = sys.block(1, 0); // rows {c,d}, cols {a,b}
        assert_relative_eq!(cross[(0, 1)], 1.0);
        assert_relative_eq!(cross.sum(), 1.0);

        assert!(sys.feeds(0, 1));
        assert!(!sys.feeds(1, 0));
        assert_eq!(sys.entrance_verdict(1), EntranceVerdict::Unique(2));
        assert_eq!(sys.entrance_verdict(0), EntranceVerdict::None);
        assert_eq!(sys.scalar_entrances().unwrap(), vec![None, Some(2)]);
    }

    #[test]
    fn multiple_entrances_are_refused_by_scalar_reduction() {
        // two states of the second block each receive an edge
        let states: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let entries = [("a", "b"), ("a", "c")].map(|(f, t)| RateEntry {
            from: f.into(),
            to: t.into(),
            rate: 1.0,
        });
        let net = ReactionNetwork::new(states, &entries).unwrap();
        let sys = CompartmentSystem::new(net, vec![vec![0], vec![1, 2]]).unwrap();
        match sys.entrance_verdict(1) {
            EntranceVerdict::Multiple(v) => assert_eq!(v, vec![1, 2]),
            other => panic!("expected Multiple, got {other:?}"),
        }
        assert!(sys.scalar_entrances().is_err());
    }

    #[test]
    fn random_reversible_pair_balances_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let (net, partition) = random_detailed_balance_pair(&mut rng);
            let cert = detect_detailed_balance(&net, 1e-10).unwrap();
            assert!(
                cert.residual() < 1e-12,
                "residual {} too large",
                cert.residual()
            );
            let sys = CompartmentSystem::new(net, partition).unwrap();
            assert_eq!(sys.entrance_verdict(0), EntranceVerdict::Unique(2));
            assert_eq!(sys.entrance_verdict(1), EntranceVerdict::Unique(3));
        }
    }

    #[test]
    fn random_network_is_conservative_and_covers_all_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = random_connected_network(&mut rng, 8, 6, 0.2, 1.0);
        assert_eq!(net.n_states(), 8);
        for j in 0..8 {
            let s: f64 = (0..8).map(|i| net.matrix()[(i, j)]).sum();
            assert!(s.abs() < 1e-12);
        }
        let partition = random_partition(&mut rng, 8, 3);
        assert_eq!(partition.len(), 3);
        let covered: usize = partition.iter().map(|b| b.len()).sum();
        assert_eq!(covered, 8);
    }
}
