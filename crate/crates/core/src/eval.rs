//! Accuracy metrics against a known truth: membership error under the
//! majority map, node-averaged and permutation-matched parameter errors,
//! confidence-interval coverage and model-selection rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::InferenceResult;
use crate::model::{GnarParams, Membership};
use crate::net::WeightMatrix;

/// Largest `G` for which permutations are searched exhaustively.
pub const MAX_PERMUTATION_GROUPS: usize = 8;
pub const NOMINAL_COVERAGE: f64 = 0.95;

fn check_same_nodes(est: &Membership, truth: &Membership) -> Result<()> {
    if est.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "estimated labels cover {} nodes, truth {}",
            est.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// `χ(g)`: the true label held by most nodes of estimated cluster `g`. Ties
/// and empty clusters map to the smallest true label.
pub fn majority_map(est: &Membership, truth: &Membership) -> Result<Vec<usize>> {
    check_same_nodes(est, truth)?;
    let mut table = vec![vec![0usize; truth.n_groups()]; est.n_groups()];
    for (&e, &t) in est.labels().iter().zip(truth.labels()) {
        table[e][t] += 1;
    }
    Ok(table
        .iter()
        .map(|row| {
            let mut best = 0;
            for (g, &c) in row.iter().enumerate() {
                if c > row[best] {
                    best = g;
                }
            }
            best
        })
        .collect())
}

/// Fraction of nodes whose true label differs from the majority label of
/// their estimated cluster.
pub fn membership_error(est: &Membership, truth: &Membership) -> Result<f64> {
    let chi = majority_map(est, truth)?;
    let wrong = est
        .labels()
        .iter()
        .zip(truth.labels())
        .filter(|(&e, &t)| chi[e] != t)
        .count();
    Ok(wrong as f64 / est.len() as f64)
}

/// All permutations of `0..g` in lexicographic order.
pub fn permutations(g: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..g).collect();
    loop {
        out.push(cur.clone());
        // next lexicographic permutation
        let Some(i) = (1..g).rev().find(|&i| cur[i - 1] < cur[i]) else {
            break;
        };
        let j = (i..g)
            .rev()
            .find(|&j| cur[j] > cur[i - 1])
            .expect("suffix has a larger entry");
        cur.swap(i - 1, j);
        cur[i..].reverse();
    }
    out
}

/// Error rate minimized over label permutations (`G = G0` only).
pub fn membership_error_perm(est: &Membership, truth: &Membership) -> Result<f64> {
    check_same_nodes(est, truth)?;
    let g = est.n_groups();
    if g != truth.n_groups() {
        return Err(Error::Invalid("permutation error needs G = G0".into()));
    }
    if g > MAX_PERMUTATION_GROUPS {
        return Err(Error::Unsupported(format!("permutation search over {g}! labelings")));
    }
    let best = permutations(g)
        .iter()
        .map(|p| {
            est.labels()
                .iter()
                .zip(truth.labels())
                .filter(|(&e, &t)| p[e] != t)
                .count()
        })
        .min()
        .expect("at least one permutation");
    Ok(best as f64 / est.len() as f64)
}

/// Node-averaged errors of one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeErrors {
    /// `N⁻¹ Σ_i ‖B̂_i· − B⁰_i·‖` over rows of the transition matrix.
    pub beta: f64,
    pub nu: f64,
    pub zeta: f64,
}

pub fn rmse_all(
    est: &GnarParams,
    est_mem: &Membership,
    truth: &GnarParams,
    truth_mem: &Membership,
    w: &WeightMatrix,
) -> Result<NodeErrors> {
    check_same_nodes(est_mem, truth_mem)?;
    if est.p() != truth.p() {
        return Err(Error::Dimension("covariate counts differ".into()));
    }
    let n = est_mem.len();
    let (mut eb, mut en, mut ez) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (gh, g0) = (est_mem.get(i), truth_mem.get(i));
        let dnu = est.nu[gh] - truth.nu[g0];
        en += dnu.abs();
        ez += (0..est.p())
            .map(|k| (est.zeta[(gh, k)] - truth.zeta[(g0, k)]).powi(2))
            .sum::<f64>()
            .sqrt();
        let (cols, vals) = w.row(i);
        let mut row_sq = dnu * dnu;
        for (&j, &wij) in cols.iter().zip(vals) {
            let d = wij * (est.beta[(gh, est_mem.get(j))] - truth.beta[(g0, truth_mem.get(j))]);
            row_sq += d * d;
        }
        eb += row_sq.sqrt();
    }
    Ok(NodeErrors {
        beta: eb / n as f64,
        nu: en / n as f64,
        zeta: ez / n as f64,
    })
}

/// Parameter errors under the best label permutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutedErrors {
    /// `perm[a]` is the estimated group matched to true group `a`.
    pub perm: Vec<usize>,
    /// Frobenius norm `‖β̂_π − β⁰‖`.
    pub beta: f64,
    pub nu: f64,
    pub zeta: f64,
}

/// Errors after the permutation minimizing `‖β̂_π − β⁰‖`, where
/// `β̂_π[a][b] = β̂[π(a)][π(b)]`; ties go to the lexicographically first
/// permutation.
pub fn rmse_perm(est: &GnarParams, truth: &GnarParams) -> Result<PermutedErrors> {
    let g = est.n_groups();
    if g != truth.n_groups() || est.p() != truth.p() {
        return Err(Error::Dimension("permutation matching needs equal G and p".into()));
    }
    if g > MAX_PERMUTATION_GROUPS {
        return Err(Error::Unsupported(format!("permutation search over {g}! labelings")));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for perm in permutations(g) {
        let d = est.permuted(&perm).beta - &truth.beta;
        let err = d.norm();
        if best.as_ref().is_none_or(|(_, e)| err < *e) {
            best = Some((perm, err));
        }
    }
    let (perm, beta) = best.expect("at least one permutation");
    let aligned = est.permuted(&perm);
    Ok(PermutedErrors {
        beta,
        nu: (&aligned.nu - &truth.nu).norm(),
        zeta: (&aligned.zeta - &truth.zeta).norm(),
        perm,
    })
}

/// Whether each true coefficient falls inside its matched interval; a
/// missing interval counts as a miss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageHits {
    /// Row-major over `(a, b)` true groups.
    pub beta: Vec<bool>,
    pub nu: Vec<bool>,
    /// Row-major over `(a, k)`.
    pub zeta: Vec<bool>,
}

pub fn coverage_hits(inf: &InferenceResult, truth: &GnarParams, perm: &[usize]) -> Result<CoverageHits> {
    let g = truth.n_groups();
    let p = truth.p();
    if inf.groups.len() != g || perm.len() != g {
        return Err(Error::Dimension(
            "inference, truth and permutation disagree on G".into(),
        ));
    }
    let inside = |grp: usize, k: usize, v: f64| {
        inf.groups[grp].coefficients[k]
            .ci
            .is_some_and(|(lo, hi)| lo <= v && v <= hi)
    };
    let mut hits = CoverageHits {
        beta: Vec::with_capacity(g * g),
        nu: Vec::with_capacity(g),
        zeta: Vec::with_capacity(g * p),
    };
    for a in 0..g {
        let ga = perm[a];
        for b in 0..g {
            hits.beta.push(inside(ga, perm[b], truth.beta[(a, b)]));
        }
        hits.nu.push(inside(ga, g, truth.nu[a]));
        for k in 0..p {
            hits.zeta.push(inside(ga, g + 1 + k, truth.zeta[(a, k)]));
        }
    }
    Ok(hits)
}

/// Per-entry coverage counts accumulated over replications.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageTally {
    pub replications: usize,
    pub beta: Vec<usize>,
    pub nu: Vec<usize>,
    pub zeta: Vec<usize>,
}

fn add_hits(counts: &mut Vec<usize>, hits: &[bool]) {
    if counts.is_empty() {
        counts.resize(hits.len(), 0);
    }
    for (c, &h) in counts.iter_mut().zip(hits) {
        *c += h as usize;
    }
}

/// Mean absolute deviation of per-entry coverage rates from the nominal level.
pub fn ae_cp(counts: &[usize], replications: usize, nominal: f64) -> f64 {
    if counts.is_empty() || replications == 0 {
        return f64::NAN;
    }
    counts
        .iter()
        .map(|&c| (c as f64 / replications as f64 - nominal).abs())
        .sum::<f64>()
        / counts.len() as f64
}

fn mean_rate(counts: &[usize], replications: usize) -> f64 {
    if counts.is_empty() || replications == 0 {
        return f64::NAN;
    }
    counts.iter().sum::<usize>() as f64 / (counts.len() * replications) as f64
}

/// Coverage summary for the three parameter families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyCoverage {
    pub beta: f64,
    pub nu: f64,
    pub zeta: f64,
}

impl CoverageTally {
    pub fn add(&mut self, hits: &CoverageHits) {
        add_hits(&mut self.beta, &hits.beta);
        add_hits(&mut self.nu, &hits.nu);
        add_hits(&mut self.zeta, &hits.zeta);
        self.replications += 1;
    }

    pub fn ae_cp(&self) -> FamilyCoverage {
        FamilyCoverage {
            beta: ae_cp(&self.beta, self.replications, NOMINAL_COVERAGE),
            nu: ae_cp(&self.nu, self.replications, NOMINAL_COVERAGE),
            zeta: ae_cp(&self.zeta, self.replications, NOMINAL_COVERAGE),
        }
    }

    /// Coverage rate pooled over all entries of each family.
    pub fn coverage(&self) -> FamilyCoverage {
        FamilyCoverage {
            beta: mean_rate(&self.beta, self.replications),
            nu: mean_rate(&self.nu, self.replications),
            zeta: mean_rate(&self.zeta, self.replications),
        }
    }
}

/// Share of replications that selected `g`.
pub fn msr(selected: &[usize], g: usize) -> f64 {
    if selected.is_empty() {
        return f64::NAN;
    }
    selected.iter().filter(|&&s| s == g).count() as f64 / selected.len() as f64
}
