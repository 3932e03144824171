//! File formats.
//!
//! Structured inputs (networks, histories, phase-type models, analysis
//! reports) are JSON. Time series (kernels, solutions, age densities) are
//! tab-separated tables with one header row and one row per time node;
//! every number is written with 12 significant digits so files diff
//! cleanly and round-trip losslessly enough for downstream solves.
//!
//! Generator convention, documented wherever a matrix leaves this crate:
//! state vectors are columns, `dn/dt = A n`, and the columns of `A` sum
//! to zero.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::analysis::{Asymptotics, MarkovVerdict};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernel::{KernelSet, ScalarKernelSet};
use crate::network::{
    CompartmentSystem, DetailedBalanceCertificate, RateEntry, ReactionNetwork,
};
use crate::phasetype::{Branch, PairApprox, PhaseTypeModel};
use crate::renewal::RenewalSolution;
use crate::spe::{AgeDensity, HistoryAtom, HistoryMeasure};

/// Fixed number format for tables: 12 significant digits.
pub fn fmt12(v: f64) -> String {
    format!("{v:.11e}")
}

/// Write via a sibling temp file and rename, so readers never observe a
/// half-written file.
pub fn atomic_write(path: &Path, content: &str) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, content)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// network specification

/// On-disk description of a network and its compartment partition.
/// `states`, `rates` and `partition` are the fixed field names; `n0` is an
/// optional map from state name to initial count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub states: Vec<String>,
    pub rates: Vec<RateEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub partition: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n0: Option<BTreeMap<String, f64>>,
}

impl NetworkSpec {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let spec: NetworkSpec = serde_json::from_str(&text)?;
        Ok(spec)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        atomic_write(path, &text)
    }

    pub fn network(&self) -> Result<ReactionNetwork> {
        ReactionNetwork::new(self.states.clone(), &self.rates)
    }

    /// Build the partitioned system; requires a nonempty `partition`.
    pub fn system(&self) -> Result<CompartmentSystem> {
        if self.partition.is_empty() {
            return Err(Error::InvalidPartition(
                "network file declares no partition".into(),
            ));
        }
        CompartmentSystem::from_names(self.network()?, &self.partition)
    }

    /// Initial state vector over the declared states; absent names get 0.
    pub fn initial_vector(&self) -> Result<DVector<f64>> {
        let mut n0 = DVector::zeros(self.states.len());
        if let Some(map) = &self.n0 {
            for (name, value) in map {
                let idx = self
                    .states
                    .iter()
                    .position(|s| s == name)
                    .ok_or_else(|| {
                        Error::Parse(format!("n0 names unknown state {name:?}"))
                    })?;
                n0[idx] = *value;
            }
        }
        Ok(n0)
    }

    pub fn from_system(system: &CompartmentSystem, n0: Option<&DVector<f64>>) -> Self {
        let network = system.network();
        let states = network.states().to_vec();
        let partition = (0..system.n_compartments())
            .map(|alpha| {
                system
                    .states_of(alpha)
                    .iter()
                    .map(|&s| states[s].clone())
                    .collect()
            })
            .collect();
        let n0 = n0.map(|v| {
            states
                .iter()
                .zip(v.iter())
                .filter(|(_, x)| **x != 0.0)
                .map(|(name, x)| (name.clone(), *x))
                .collect()
        });
        Self {
            states,
            rates: network.rate_entries(),
            partition,
            n0,
        }
    }
}

// ---------------------------------------------------------------------------
// tables

fn push_row(out: &mut String, cells: &[String]) {
    out.push_str(&cells.join("\t"));
    out.push('\n');
}

/// Write the vector kernel table: `t`, then every propagation block entry
/// `G[beta->alpha][i,j]`, every return-time block entry `K[alpha][i,j]`,
/// and (optionally) the forcing components `S0[alpha][i]`, `J0[alpha][i]`.
/// Local state indices are 0-based.
pub fn write_kernel_table(
    kernels: &KernelSet,
    labels: &[String],
    path: &Path,
    with_forcing: bool,
) -> Result<()> {
    let grid = kernels.grid();
    let mut header = vec!["t".to_string()];
    let pairs: Vec<_> = kernels.pairs().collect();
    for (&(beta, alpha), block) in &pairs {
        for i in 0..block.rows() {
            for j in 0..block.cols() {
                header.push(format!("G[{}->{}][{i},{j}]", labels[beta], labels[alpha]));
            }
        }
    }
    let n_comp = kernels.n_compartments();
    for alpha in 0..n_comp {
        let block = kernels.k(alpha);
        for i in 0..block.rows() {
            for j in 0..block.cols() {
                header.push(format!("K[{}][{i},{j}]", labels[alpha]));
            }
        }
    }
    if with_forcing {
        for alpha in 0..n_comp {
            for i in 0..kernels.forcing().s0(alpha).rows() {
                header.push(format!("S0[{}][{i}]", labels[alpha]));
            }
        }
        for alpha in 0..n_comp {
            for i in 0..kernels.forcing().j0(alpha).rows() {
                header.push(format!("J0[{}][{i}]", labels[alpha]));
            }
        }
    }
    let mut out = String::new();
    push_row(&mut out, &header);
    let mut cells: Vec<String> = Vec::with_capacity(header.len());
    for n in 0..grid.len() {
        cells.clear();
        cells.push(fmt12(grid.t(n)));
        for (_, block) in &pairs {
            for i in 0..block.rows() {
                for j in 0..block.cols() {
                    cells.push(fmt12(block.at(i, j, n)));
                }
            }
        }
        for alpha in 0..n_comp {
            let block = kernels.k(alpha);
            for i in 0..block.rows() {
                for j in 0..block.cols() {
                    cells.push(fmt12(block.at(i, j, n)));
                }
            }
        }
        if with_forcing {
            for alpha in 0..n_comp {
                let s0 = kernels.forcing().s0(alpha);
                for i in 0..s0.rows() {
                    cells.push(fmt12(s0.at(i, 0, n)));
                }
            }
            for alpha in 0..n_comp {
                let j0 = kernels.forcing().j0(alpha);
                for i in 0..j0.rows() {
                    cells.push(fmt12(j0.at(i, 0, n)));
                }
            }
        }
        push_row(&mut out, &cells);
    }
    atomic_write(path, &out)
}

/// Write the scalar kernel table: `t`, `Phi[a->b]` per routed pair,
/// `k[a]` per compartment, and the scalar forcing `B0[a]`, `D0[a]` plus a
/// `# n0` comment line when forcing is attached.
pub fn write_scalar_table(scalar: &ScalarKernelSet, path: &Path) -> Result<()> {
    let grid = scalar.grid();
    let labels = scalar.labels();
    let n_comp = scalar.n_compartments();
    let mut out = String::new();
    if scalar.has_forcing() {
        let n0: Vec<String> = scalar.n0().iter().map(|v| fmt12(*v)).collect();
        out.push_str("# n0\t");
        out.push_str(&n0.join("\t"));
        out.push('\n');
    }
    let mut header = vec!["t".to_string()];
    let pairs: Vec<_> = scalar.pairs().collect();
    for ((from, to), _) in &pairs {
        header.push(format!("Phi[{}->{}]", labels[*from], labels[*to]));
    }
    for label in labels {
        header.push(format!("k[{label}]"));
    }
    if scalar.has_forcing() {
        for label in labels {
            header.push(format!("B0[{label}]"));
        }
        for label in labels {
            header.push(format!("D0[{label}]"));
        }
    }
    push_row(&mut out, &header);
    let mut cells: Vec<String> = Vec::with_capacity(header.len());
    for n in 0..grid.len() {
        cells.clear();
        cells.push(fmt12(grid.t(n)));
        for (_, phi) in &pairs {
            cells.push(fmt12(phi[n]));
        }
        for alpha in 0..n_comp {
            cells.push(fmt12(scalar.k(alpha)[n]));
        }
        if scalar.has_forcing() {
            for alpha in 0..n_comp {
                cells.push(fmt12(scalar.b0(alpha)[n]));
            }
            for alpha in 0..n_comp {
                cells.push(fmt12(scalar.d0(alpha)[n]));
            }
        }
        push_row(&mut out, &cells);
    }
    atomic_write(path, &out)
}

/// Read a scalar kernel table written by [`write_scalar_table`].
/// Compartment order is taken from the `k[...]` columns.
pub fn read_scalar_table(path: &Path) -> Result<ScalarKernelSet> {
    let text = fs::read_to_string(path)?;
    let mut n0_line: Option<Vec<f64>> = None;
    let mut header: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# n0\t") {
            n0_line = Some(parse_floats(rest)?);
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            header = Some(line.split('\t').map(str::to_string).collect());
            continue;
        }
        rows.push(parse_floats(line)?);
    }
    let header = header.ok_or_else(|| Error::Parse("table has no header row".into()))?;
    if header.first().map(String::as_str) != Some("t") {
        return Err(Error::Parse("first column must be t".into()));
    }
    if rows.len() < 2 {
        return Err(Error::Parse("table needs at least two time nodes".into()));
    }
    for row in &rows {
        if row.len() != header.len() {
            return Err(Error::Parse(format!(
                "row with {} cells under a {}-column header",
                row.len(),
                header.len()
            )));
        }
    }
    // reconstruct the grid from the time column
    let dt = rows[1][0] - rows[0][0];
    if dt <= 0.0 {
        return Err(Error::Parse("time column must increase".into()));
    }
    for (i, pair) in rows.windows(2).enumerate() {
        let step = pair[1][0] - pair[0][0];
        if (step - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(Error::Parse(format!(
                "non-uniform time spacing near row {i}"
            )));
        }
    }
    let grid = TimeGrid::from_steps(dt, rows.len() - 1)?;

    // classify columns
    let mut labels: Vec<String> = Vec::new();
    for name in &header {
        if let Some(l) = name.strip_prefix("k[").and_then(|s| s.strip_suffix(']')) {
            labels.push(l.to_string());
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse("table has no k[...] columns".into()));
    }
    let index_of = |label: &str| -> Result<usize> {
        labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Parse(format!("unknown compartment {label:?}")))
    };
    let column = |c: usize| -> Vec<f64> { rows.iter().map(|r| r[c]).collect() };

    let mut phi: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut k: Vec<Option<Vec<f64>>> = vec![None; labels.len()];
    let mut b0: Vec<Option<Vec<f64>>> = vec![None; labels.len()];
    let mut d0: Vec<Option<Vec<f64>>> = vec![None; labels.len()];
    for (c, name) in header.iter().enumerate().skip(1) {
        if let Some(body) = name.strip_prefix("Phi[").and_then(|s| s.strip_suffix(']')) {
            let (from, to) = body
                .split_once("->")
                .ok_or_else(|| Error::Parse(format!("malformed header {name:?}")))?;
            phi.insert((index_of(from)?, index_of(to)?), column(c));
        } else if let Some(l) = name.strip_prefix("k[").and_then(|s| s.strip_suffix(']')) {
            k[index_of(l)?] = Some(column(c));
        } else if let Some(l) = name.strip_prefix("B0[").and_then(|s| s.strip_suffix(']')) {
            b0[index_of(l)?] = Some(column(c));
        } else if let Some(l) = name.strip_prefix("D0[").and_then(|s| s.strip_suffix(']')) {
            d0[index_of(l)?] = Some(column(c));
        } else {
            return Err(Error::Parse(format!("unrecognized header {name:?}")));
        }
    }
    let k: Vec<Vec<f64>> = k
        .into_iter()
        .map(|c| c.ok_or_else(|| Error::Parse("missing k column".into())))
        .collect::<Result<_>>()?;
    let has_b0 = b0.iter().any(Option::is_some);
    let unwrap_all = |v: Vec<Option<Vec<f64>>>, what: &str| -> Result<Vec<Vec<f64>>> {
        v.into_iter()
            .map(|c| c.ok_or_else(|| Error::Parse(format!("incomplete {what} columns"))))
            .collect()
    };
    let (b0, d0, n0) = if has_b0 {
        let b0 = unwrap_all(b0, "B0")?;
        let d0 = unwrap_all(d0, "D0")?;
        let n0 = n0_line.unwrap_or_else(|| vec![0.0; labels.len()]);
        if n0.len() != labels.len() {
            return Err(Error::Parse("n0 comment length mismatch".into()));
        }
        (Some(b0), Some(d0), Some(n0))
    } else {
        (None, None, None)
    };
    ScalarKernelSet::from_parts(grid, labels, phi, Some(k), b0, d0, n0)
}

fn parse_floats(line: &str) -> Result<Vec<f64>> {
    line.split('\t')
        .map(|cell| {
            cell.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad number {cell:?}: {e}")))
        })
        .collect()
}

/// Write a solution table: `t, N[a]..., B[a]..., D[a]...` when the solve
/// was scalar, otherwise `t, N[a]..., S[a][i]..., J[a][i]...`.
pub fn write_solution_table(solution: &RenewalSolution, path: &Path) -> Result<()> {
    let grid = solution.grid();
    let labels = solution.labels();
    let n_comp = solution.n_compartments();
    let scalar = (0..n_comp).all(|a| solution.s(a).len() == 1);
    let mut header = vec!["t".to_string()];
    for l in labels {
        header.push(format!("N[{l}]"));
    }
    if scalar {
        for l in labels {
            header.push(format!("B[{l}]"));
        }
        for l in labels {
            header.push(format!("D[{l}]"));
        }
    } else {
        for (a, l) in labels.iter().enumerate() {
            for i in 0..solution.s(a).len() {
                header.push(format!("S[{l}][{i}]"));
            }
        }
        for (a, l) in labels.iter().enumerate() {
            for i in 0..solution.j(a).len() {
                header.push(format!("J[{l}][{i}]"));
            }
        }
    }
    let mut out = String::new();
    push_row(&mut out, &header);
    let mut cells: Vec<String> = Vec::with_capacity(header.len());
    for n in 0..grid.len() {
        cells.clear();
        cells.push(fmt12(grid.t(n)));
        for a in 0..n_comp {
            cells.push(fmt12(solution.n(a)[n]));
        }
        if scalar {
            for a in 0..n_comp {
                cells.push(fmt12(solution.b(a)[n]));
            }
            for a in 0..n_comp {
                cells.push(fmt12(solution.d(a)[n]));
            }
        } else {
            for a in 0..n_comp {
                for comp in solution.s(a) {
                    cells.push(fmt12(comp[n]));
                }
            }
            for a in 0..n_comp {
                for comp in solution.j(a) {
                    cells.push(fmt12(comp[n]));
                }
            }
        }
        push_row(&mut out, &cells);
    }
    atomic_write(path, &out)
}

/// Write age-density snapshots, one file per compartment named
/// `{stem}_{label}.tsv`: rows are snapshot times, columns age nodes,
/// first column `t`.
pub fn write_age_density(
    density: &AgeDensity,
    dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    let xi = density.xi_grid();
    let t = density.t_grid();
    let mut written = Vec::new();
    for (alpha, label) in density.labels().iter().enumerate() {
        let mut header = vec!["t".to_string()];
        for k in 0..xi.len() {
            header.push(format!("xi={}", fmt12(xi.t(k))));
        }
        let mut out = String::new();
        push_row(&mut out, &header);
        let mut cells: Vec<String> = Vec::with_capacity(header.len());
        for (node, profiles) in density.snapshots() {
            cells.clear();
            cells.push(fmt12(t.t(*node)));
            for v in &profiles[alpha] {
                cells.push(fmt12(*v));
            }
            push_row(&mut out, &cells);
        }
        let path = dir.join(format!("{stem}_{label}.tsv"));
        atomic_write(&path, &out)?;
        written.push(path);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// history measures

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AtomJson {
    loc: f64,
    mass: f64,
}

/// On-disk arrival history: one atom list per compartment, atom locations
/// are past arrival times (nonpositive).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistorySpec {
    atoms: Vec<Vec<AtomJson>>,
}

impl HistorySpec {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        atomic_write(path, &text)
    }

    pub fn from_history(history: &HistoryMeasure) -> Self {
        let atoms = (0..history.n_compartments())
            .map(|alpha| {
                history
                    .atoms(alpha)
                    .iter()
                    .map(|a| AtomJson { loc: a.loc, mass: a.mass })
                    .collect()
            })
            .collect();
        Self { atoms }
    }

    pub fn history(&self) -> Result<HistoryMeasure> {
        HistoryMeasure::new(
            self.atoms
                .iter()
                .map(|list| {
                    list.iter()
                        .map(|a| HistoryAtom { loc: a.loc, mass: a.mass })
                        .collect()
                })
                .collect(),
        )
    }
}

// ---------------------------------------------------------------------------
// phase-type models

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BranchJson {
    q: f64,
    m: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PairJson {
    alpha: String,
    beta: String,
    p: f64,
    #[serde(rename = "M")]
    rate: f64,
    scale: f64,
    branches: Vec<BranchJson>,
}

/// On-disk Erlang-mixture model: each pair records its routing mass `p`,
/// shared rate `M`, binned support `scale`, and branches `{q, m}` (weight
/// and shape).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseTypeFile {
    labels: Vec<String>,
    pairs: Vec<PairJson>,
}

impl PhaseTypeFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        atomic_write(path, &text)
    }

    pub fn from_model(model: &PhaseTypeModel) -> Self {
        let labels = model.labels().to_vec();
        let pairs = model
            .pairs()
            .iter()
            .map(|p| PairJson {
                alpha: labels[p.from].clone(),
                beta: labels[p.to].clone(),
                p: p.mass,
                rate: p.rate,
                scale: p.span,
                branches: p
                    .branches
                    .iter()
                    .map(|b| BranchJson { q: b.weight, m: b.shape })
                    .collect(),
            })
            .collect();
        Self { labels, pairs }
    }

    pub fn model(&self) -> Result<PhaseTypeModel> {
        let index_of = |label: &str| -> Result<usize> {
            self.labels
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| Error::Parse(format!("unknown compartment {label:?}")))
        };
        let pairs = self
            .pairs
            .iter()
            .map(|p| {
                Ok(PairApprox {
                    from: index_of(&p.alpha)?,
                    to: index_of(&p.beta)?,
                    mass: p.p,
                    rate: p.rate,
                    span: p.scale,
                    distance: f64::NAN,
                    branches: p
                        .branches
                        .iter()
                        .map(|b| Branch { weight: b.q, shape: b.m })
                        .collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        PhaseTypeModel::new(self.labels.clone(), pairs)
    }
}

// ---------------------------------------------------------------------------
// analysis reports

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkovReport {
    pub accepted: bool,
    pub rates: Vec<f64>,
    pub max_affinity_dev: f64,
    pub max_rate_dev: f64,
    pub evidence: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<Vec<Vec<f64>>>,
}

impl From<&MarkovVerdict> for MarkovReport {
    fn from(v: &MarkovVerdict) -> Self {
        Self {
            accepted: v.accepted,
            rates: v.rates.clone(),
            max_affinity_dev: v.max_affinity_dev,
            max_rate_dev: v.max_rate_dev,
            evidence: v.evidence.clone(),
            generator: v.generator.as_ref().map(|g| {
                (0..g.nrows())
                    .map(|i| (0..g.ncols()).map(|j| g[(i, j)]).collect())
                    .collect()
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceReport {
    pub certified: bool,
    pub residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reversible_measure: Option<Vec<f64>>,
}

impl From<&DetailedBalanceCertificate> for BalanceReport {
    fn from(c: &DetailedBalanceCertificate) -> Self {
        Self {
            certified: c.is_certified(),
            residual: c.residual(),
            reversible_measure: c.mu().map(|m| m.iter().cloned().collect()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsymptoticsReport {
    pub c0: f64,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    pub b_inf: Vec<f64>,
    pub n_inf: Vec<f64>,
    pub warnings: Vec<String>,
}

impl From<&Asymptotics> for AsymptoticsReport {
    fn from(a: &Asymptotics) -> Self {
        Self {
            c0: a.c0,
            v: a.v.clone(),
            u: a.u.clone(),
            b_inf: a.b_inf.clone(),
            n_inf: a.n_inf.clone(),
            warnings: a.warnings.clone(),
        }
    }
}

/// Combined analysis output; absent sections were not requested.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AnalysisReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub markovianity: Option<MarkovReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detailed_balance: Option<BalanceReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asymptotics: Option<AsymptoticsReport>,
}

impl AnalysisReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        atomic_write(path, &text)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
