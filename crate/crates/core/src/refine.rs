//! One-pass membership refinement with a node-level profile loss.
//!
//! For node `i` and candidate group `g`, the profile loss keeps the fitted
//! momentum and fixed effects of `g` but lets the network-effect vector range
//! over every pattern `(β̂[h][l_j] w_ij : j followed by i)` reachable by
//! relabeling `i` (row `h`) and its followees (`l_j`). A node switches to its
//! profile-loss minimizer only when that beats its current label by more than
//! a threshold.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::estimate::{loss, FitResult};
use crate::model::{Membership, Panel};
use crate::net::WeightMatrix;
use crate::rng;

/// Largest `G^{n_i+1}` for which the profile loss is enumerated exactly.
pub const DEFAULT_BUDGET: u64 = 4096;
/// Random label draws added to the deterministic starts of the heuristic search.
pub const HEURISTIC_RESTARTS: usize = 3;
/// Perturbation rounds applied to the best labeling of each row.
pub const HEURISTIC_KICKS: usize = 20;
/// Labels redrawn per perturbation.
const KICK_SIZE: usize = 3;
pub const THRESHOLD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Search {
    /// Enumerate when within budget, otherwise coordinate descent.
    Auto,
    Enumerate,
    CoordinateDescent,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RefineOptions {
    pub budget: u64,
    pub search: Search,
    /// Seeds the random starts of the heuristic search.
    pub seed: u64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            budget: DEFAULT_BUDGET,
            search: Search::Auto,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementReport {
    pub labels_before: Membership,
    pub labels_after: Membership,
    /// Nodes whose label changed, ascending.
    pub switched: Vec<usize>,
    pub threshold: f64,
    /// `profile_losses[i][g] = Q_i^P(g)`.
    pub profile_losses: Vec<Vec<f64>>,
}

/// Node-level quadratic `T⁻¹ ‖e − Σ_j c_j u_j‖²` in the coefficients `c`,
/// with `u_j = w_ij Y_j(t−1)`.
struct NodeQuadratic {
    /// `eᵀe` for each candidate group's (ν, ζ).
    ee: Vec<f64>,
    /// `eᵀu_j` for each candidate group, `[g][j]`.
    eu: Vec<Vec<f64>>,
    /// `uᵀu`, `n_i × n_i`.
    uu: DMatrix<f64>,
    horizon: f64,
}

impl NodeQuadratic {
    fn new(fit: &FitResult, panel: &Panel, w: &WeightMatrix, i: usize) -> Self {
        let params = &fit.params;
        let g_total = params.n_groups();
        let (cols, vals) = w.row(i);
        let t = panel.horizon();
        let u: Vec<Vec<f64>> = cols
            .iter()
            .zip(vals)
            .map(|(&j, &wij)| panel.lagged(j).iter().map(|y| wij * y).collect())
            .collect();
        let n = u.len();
        let uu = DMatrix::from_fn(n, n, |a, b| u[a].iter().zip(&u[b]).map(|(x, y)| x * y).sum());
        let mut ee = Vec::with_capacity(g_total);
        let mut eu = Vec::with_capacity(g_total);
        let mut e = vec![0.0; t];
        for g in 0..g_total {
            let fe: f64 = (0..panel.p()).map(|k| panel.z()[(i, k)] * params.zeta[(g, k)]).sum();
            for ((ev, &y), &yl) in e.iter_mut().zip(panel.response(i)).zip(panel.lagged(i)) {
                *ev = y - params.nu[g] * yl - fe;
            }
            ee.push(e.iter().map(|v| v * v).sum());
            eu.push(u.iter().map(|uj| uj.iter().zip(&e).map(|(a, b)| a * b).sum()).collect());
        }
        NodeQuadratic {
            ee,
            eu,
            uu,
            horizon: t as f64,
        }
    }

    fn n(&self) -> usize {
        self.uu.nrows()
    }
}

/// Exact minimum over `h ∈ [G]` and all neighbor labelings, visiting labelings
/// in odometer order with rank-one updates.
fn enumerate_min(q: &NodeQuadratic, g: usize, beta: &DMatrix<f64>) -> f64 {
    let n = q.n();
    let g_total = beta.nrows();
    let eu = &q.eu[g];
    let mut best = f64::INFINITY;
    for h in 0..g_total {
        let row: Vec<f64> = beta.row(h).iter().copied().collect();
        let mut labels = vec![0usize; n];
        let mut c = vec![row[0]; n];
        // m = UᵀU c, s = ‖e − U c‖²
        let cv = DVector::from_column_slice(&c);
        let mut m: Vec<f64> = (&q.uu * &cv).iter().copied().collect();
        let mut s = q.ee[g] - 2.0 * eu.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
            + m.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        loop {
            best = best.min(s);
            // advance the odometer
            let mut pos = 0;
            while pos < n && labels[pos] + 1 == g_total {
                let delta = row[0] - c[pos];
                apply_change(q, eu, &mut m, &mut s, pos, delta);
                c[pos] = row[0];
                labels[pos] = 0;
                pos += 1;
            }
            if pos == n {
                break;
            }
            labels[pos] += 1;
            let delta = row[labels[pos]] - c[pos];
            apply_change(q, eu, &mut m, &mut s, pos, delta);
            c[pos] = row[labels[pos]];
        }
    }
    best.max(0.0) / q.horizon
}

fn apply_change(q: &NodeQuadratic, eu: &[f64], m: &mut [f64], s: &mut f64, j: usize, delta: f64) {
    if delta == 0.0 {
        return;
    }
    *s += -2.0 * delta * eu[j] + 2.0 * delta * m[j] + delta * delta * q.uu[(j, j)];
    for (k, mk) in m.iter_mut().enumerate() {
        *mk += delta * q.uu[(k, j)];
    }
}

/// Local search over neighbor labels for a fixed row `h`: single-label moves
/// until none helps, then pairwise moves, repeated until stable.
fn local_search(q: &NodeQuadratic, g: usize, row: &[f64], labels: &mut [usize]) -> f64 {
    let n = q.n();
    let g_total = row.len();
    let eu = &q.eu[g];
    let mut c: Vec<f64> = labels.iter().map(|&l| row[l]).collect();
    let cv = DVector::from_column_slice(&c);
    let mut m: Vec<f64> = (&q.uu * &cv).iter().copied().collect();
    let mut s = q.ee[g] - 2.0 * eu.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
        + m.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
    let tol = |s: f64| 1e-14 * s.abs().max(q.ee[g]).max(f64::MIN_POSITIVE);

    loop {
        let mut improved = false;
        // cyclic single-coordinate pass
        for j in 0..n {
            let mut best_l = labels[j];
            let mut best_gain = 0.0;
            for l in 0..g_total {
                let d = row[l] - c[j];
                let change = -2.0 * d * eu[j] + 2.0 * d * m[j] + d * d * q.uu[(j, j)];
                if change < best_gain - tol(s) {
                    best_gain = change;
                    best_l = l;
                }
            }
            if best_l != labels[j] {
                let d = row[best_l] - c[j];
                apply_change(q, eu, &mut m, &mut s, j, d);
                c[j] = row[best_l];
                labels[j] = best_l;
                improved = true;
            }
        }
        if improved {
            continue;
        }
        // pairwise moves
        'pairs: for a in 0..n {
            for b in a + 1..n {
                for la in 0..g_total {
                    for lb in 0..g_total {
                        let da = row[la] - c[a];
                        let db = row[lb] - c[b];
                        if da == 0.0 || db == 0.0 {
                            continue;
                        }
                        let change = -2.0 * da * eu[a] + 2.0 * da * m[a] + da * da * q.uu[(a, a)] - 2.0 * db * eu[b]
                            + 2.0 * db * m[b]
                            + db * db * q.uu[(b, b)]
                            + 2.0 * da * db * q.uu[(a, b)];
                        if change < -tol(s) {
                            apply_change(q, eu, &mut m, &mut s, a, da);
                            apply_change(q, eu, &mut m, &mut s, b, db);
                            c[a] = row[la];
                            c[b] = row[lb];
                            labels[a] = la;
                            labels[b] = lb;
                            improved = true;
                            break 'pairs;
                        }
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
    s
}

fn heuristic_min<R: Rng + ?Sized>(
    q: &NodeQuadratic,
    g: usize,
    beta: &DMatrix<f64>,
    fitted: &[usize],
    rng: &mut R,
) -> f64 {
    let g_total = beta.nrows();
    let n = q.n();
    let mut starts = vec![fitted.to_vec()];
    for _ in 0..HEURISTIC_RESTARTS {
        starts.push((0..n).map(|_| rng.random_range(0..g_total)).collect());
    }
    for l in 0..g_total {
        starts.push(vec![l; n]);
    }
    let unconstrained =
        q.uu.clone()
            .pseudo_inverse(1e-12)
            .ok()
            .map(|p| p * DVector::from_column_slice(&q.eu[g]));
    let mut best = f64::INFINITY;
    for h in 0..g_total {
        let row: Vec<f64> = beta.row(h).iter().copied().collect();
        let mut row_starts = starts.clone();
        // the unconstrained least-squares coefficients rounded to the nearest admissible value
        if let Some(c) = &unconstrained {
            row_starts.push(
                c.iter()
                    .map(|&cj| {
                        (0..g_total)
                            .min_by(|&a, &b| (row[a] - cj).abs().total_cmp(&(row[b] - cj).abs()))
                            .unwrap()
                    })
                    .collect(),
            );
        }
        let mut row_best = f64::INFINITY;
        let mut best_labels = Vec::new();
        for start in row_starts {
            let mut labels = start;
            let v = local_search(q, g, &row, &mut labels);
            if v < row_best {
                row_best = v;
                best_labels = labels;
            }
        }
        // iterated local search: redraw a few labels of the incumbent and descend again
        for _ in 0..HEURISTIC_KICKS {
            let mut labels = best_labels.clone();
            for _ in 0..KICK_SIZE.min(n) {
                labels[rng.random_range(0..n)] = rng.random_range(0..g_total);
            }
            let v = local_search(q, g, &row, &mut labels);
            if v < row_best {
                row_best = v;
                best_labels = labels;
            }
        }
        best = best.min(row_best);
    }
    best.max(0.0) / q.horizon
}

fn within_budget(g: usize, n_i: usize, budget: u64) -> bool {
    u32::try_from(n_i + 1)
        .ok()
        .and_then(|e| (g as u64).checked_pow(e))
        .is_some_and(|v| v <= budget)
}

fn node_profile<R: Rng + ?Sized>(
    fit: &FitResult,
    panel: &Panel,
    w: &WeightMatrix,
    i: usize,
    opts: &RefineOptions,
    rng: &mut R,
) -> Vec<f64> {
    let q = NodeQuadratic::new(fit, panel, w, i);
    let g_total = fit.params.n_groups();
    let exact = match opts.search {
        Search::Enumerate => true,
        Search::CoordinateDescent => false,
        Search::Auto => within_budget(g_total, q.n(), opts.budget),
    };
    let (cols, _) = w.row(i);
    let fitted: Vec<usize> = cols.iter().map(|&j| fit.membership.get(j)).collect();
    (0..g_total)
        .map(|g| {
            if exact {
                enumerate_min(&q, g, &fit.params.beta)
            } else {
                heuristic_min(&q, g, &fit.params.beta, &fitted, rng)
            }
        })
        .collect()
}

/// `Q_i^P(g)`.
pub fn profile_loss(fit: &FitResult, panel: &Panel, w: &WeightMatrix, i: usize, g: usize, opts: &RefineOptions) -> f64 {
    let mut r = rng::child_rng(opts.seed, rng::STREAM_REFINE, i as u64);
    node_profile(fit, panel, w, i, opts, &mut r)[g]
}

/// `(2/G) Σ_g sd_g`, where `sd_g` is the sample standard deviation of the
/// fitted per-node losses in group `g` (0 for groups with fewer than two
/// members), floored at [`THRESHOLD_FLOOR`].
pub fn default_threshold(fit: &FitResult, panel: &Panel, w: &WeightMatrix) -> Result<f64> {
    let per_node = loss(&fit.params, &fit.membership, panel, w)?.per_node;
    let g_total = fit.params.n_groups();
    let mut sum_sd = 0.0;
    for g in 0..g_total {
        let vals: Vec<f64> = fit.membership.members(g).iter().map(|&i| per_node[i]).collect();
        if vals.len() < 2 {
            continue;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64;
        sum_sd += var.sqrt();
    }
    Ok((2.0 / g_total as f64 * sum_sd).max(THRESHOLD_FLOOR))
}

/// Refine the fitted labels in one synchronized pass: every node is judged
/// against the unrefined labels. Node `i` moves to `argmin_g Q_i^P(g)` (ties to
/// the smallest index) when `Q_i^P(ĝ_i) − min_g Q_i^P(g)` exceeds the
/// threshold (default: [`default_threshold`]).
pub fn refine(
    fit: &FitResult,
    panel: &Panel,
    w: &WeightMatrix,
    threshold: Option<f64>,
    opts: &RefineOptions,
) -> Result<RefinementReport> {
    let threshold = match threshold {
        Some(t) => t,
        None => default_threshold(fit, panel, w)?,
    };
    let profile_losses: Vec<Vec<f64>> = (0..panel.n_nodes())
        .into_par_iter()
        .map(|i| {
            let mut r = rng::child_rng(opts.seed, rng::STREAM_REFINE, i as u64);
            node_profile(fit, panel, w, i, opts, &mut r)
        })
        .collect();
    let before = fit.membership.clone();
    let mut after = before.clone();
    let mut switched = Vec::new();
    for (i, pl) in profile_losses.iter().enumerate() {
        let mut dagger = 0;
        for (g, &v) in pl.iter().enumerate() {
            if v < pl[dagger] {
                dagger = g;
            }
        }
        let cur = before.get(i);
        if dagger != cur && pl[cur] - pl[dagger] > threshold {
            after.set(i, dagger);
            switched.push(i);
        }
    }
    Ok(RefinementReport {
        labels_before: before,
        labels_after: after,
        switched,
        threshold,
        profile_losses,
    })
}
