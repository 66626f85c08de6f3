//! Least-squares objective, per-group closed-form solves and the alternating
//! membership/parameter algorithm.
//!
//! For a membership vector the objective separates over groups: stacking the
//! rows `x_i(t−1) = (Ỹ_i(t−1),1 .. Ỹ_i(t−1),G, Y_i(t−1), z_i)` of the nodes in
//! group `g` gives an ordinary regression whose solution is `ξ_g`. Here
//! `Ỹ_i(t−1),h` is the weighted lag of the followees of `i` that sit in group `h`.
//!
//! [`fit`] alternates sequential membership sweeps ([`update_memberships`])
//! with the per-group solves until the labels stop moving.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, gram_solve, min_norm_lstsq, sum_sq};
use crate::model::{GnarParams, Membership, Panel};
use crate::net::WeightMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Relative loss decrease required alongside label stability. A sweep
    /// that moves no label leaves the next solve unchanged, so the decrease
    /// is then exactly zero.
    pub tol: f64,
    /// Maximum number of (membership sweep, parameter solve) iterations.
    pub max_iter: usize,
    /// Cap on full sweeps inside one membership update.
    pub max_sweeps: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-8,
            max_iter: 100,
            max_sweeps: 100,
        }
    }
}

/// Sufficient statistics of one group's regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupGram {
    pub dim: usize,
    /// Number of stacked rows, `N_g · T`.
    pub n_rows: usize,
    /// `X_gᵀ X_g`, row-major.
    pub xtx: Vec<f64>,
    pub xty: Vec<f64>,
    pub yty: f64,
}

impl GroupGram {
    fn empty(dim: usize) -> Self {
        GroupGram {
            dim,
            n_rows: 0,
            xtx: vec![0.0; dim * dim],
            xty: vec![0.0; dim],
            yty: 0.0,
        }
    }

    pub fn xtx_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.xtx)
    }

    pub fn xty_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.xty)
    }
}

/// Outcome of an estimation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub params: GnarParams,
    pub membership: Membership,
    /// Final objective value `Q`.
    pub loss: f64,
    /// `Q` after the initial solve and after every iteration that moved labels.
    pub loss_trace: Vec<f64>,
    /// Per-group Gram statistics at the final membership.
    pub grams: Vec<GroupGram>,
    pub converged: bool,
    pub n_iterations: usize,
    /// Position of the winning initial membership in the pool.
    pub init_index: usize,
    pub n_nodes: usize,
    pub horizon: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl FitResult {
    pub fn n_groups(&self) -> usize {
        self.params.n_groups()
    }

    /// Residual sum of squares, `N T Q`.
    pub fn rss(&self) -> f64 {
        self.loss * (self.n_nodes * self.horizon) as f64
    }
}

/// Objective value and its per-node terms `Q_i`.
#[derive(Debug, Clone)]
pub struct Loss {
    pub total: f64,
    pub per_node: Vec<f64>,
}

fn check_inputs(panel: &Panel, w: &WeightMatrix, mem: &Membership) -> Result<()> {
    if panel.n_nodes() != w.n_nodes() || mem.len() != w.n_nodes() {
        return Err(Error::Dimension(format!(
            "panel has {} nodes, network {}, membership {}",
            panel.n_nodes(),
            w.n_nodes(),
            mem.len()
        )));
    }
    Ok(())
}

fn node_residuals(params: &GnarParams, labels: &[usize], panel: &Panel, w: &WeightMatrix, i: usize, out: &mut [f64]) {
    let g = labels[i];
    let fe: f64 = (0..panel.p()).map(|k| panel.z()[(i, k)] * params.zeta[(g, k)]).sum();
    let nu = params.nu[g];
    let resp = panel.response(i);
    let lag = panel.lagged(i);
    for t in 0..out.len() {
        out[t] = resp[t] - nu * lag[t] - fe;
    }
    let (cols, vals) = w.row(i);
    for (&j, &wij) in cols.iter().zip(vals) {
        let c = params.beta[(g, labels[j])] * wij;
        for (o, &yl) in out.iter_mut().zip(panel.lagged(j)) {
            *o -= c * yl;
        }
    }
}

/// `Q = N⁻¹ Σ_i Q_i` with `Q_i = T⁻¹ Σ_t r_it²`.
pub fn loss(params: &GnarParams, mem: &Membership, panel: &Panel, w: &WeightMatrix) -> Result<Loss> {
    check_inputs(panel, w, mem)?;
    let n = panel.n_nodes();
    let t = panel.horizon();
    let mut r = vec![0.0; t];
    let mut per_node = Vec::with_capacity(n);
    for i in 0..n {
        node_residuals(params, mem.labels(), panel, w, i, &mut r);
        per_node.push(sum_sq(&r) / t as f64);
    }
    let total = per_node.iter().sum::<f64>() / n as f64;
    Ok(Loss { total, per_node })
}

fn fixed_effect(params: &GnarParams, panel: &Panel, i: usize, h: usize) -> f64 {
    (0..panel.p()).map(|k| panel.z()[(i, k)] * params.zeta[(h, k)]).sum()
}

/// `Q` at `labels`, accumulated node by node.
fn loss_direct(params: &GnarParams, labels: &[usize], panel: &Panel, w: &WeightMatrix) -> f64 {
    let t = panel.horizon();
    let mut r = vec![0.0; t];
    let mut ss = 0.0;
    for i in 0..labels.len() {
        node_residuals(params, labels, panel, w, i, &mut r);
        ss += sum_sq(&r);
    }
    ss / (labels.len() * t) as f64
}

/// Group-split network lags `Ỹ_i(t−1),h`, laid out as `[(i * G + h) * T + t]`.
#[derive(Debug, Clone)]
pub struct NetworkLags {
    g: usize,
    t: usize,
    data: Vec<f64>,
}

impl NetworkLags {
    pub fn compute(panel: &Panel, w: &WeightMatrix, labels: &[usize], g: usize) -> Self {
        let n = panel.n_nodes();
        let t = panel.horizon();
        let mut data = vec![0.0; n * g * t];
        for i in 0..n {
            let (cols, vals) = w.row(i);
            for (&j, &wij) in cols.iter().zip(vals) {
                let off = (i * g + labels[j]) * t;
                for (d, &yl) in data[off..off + t].iter_mut().zip(panel.lagged(j)) {
                    *d += wij * yl;
                }
            }
        }
        NetworkLags { g, t, data }
    }

    pub fn get(&self, i: usize, h: usize) -> &[f64] {
        let off = (i * self.g + h) * self.t;
        &self.data[off..off + self.t]
    }
}

/// Stacked per-group designs `X_g` and responses `Y_g`.
#[derive(Debug, Clone)]
pub struct DesignBlocks {
    pub x: Vec<DMatrix<f64>>,
    pub y: Vec<DVector<f64>>,
    /// `(node, t)` of every stacked row, per group.
    pub rows: Vec<Vec<(usize, usize)>>,
}

fn group_design(panel: &Panel, lags: &NetworkLags, nodes: &[usize], g_total: usize) -> (DMatrix<f64>, DVector<f64>) {
    let t = panel.horizon();
    let p = panel.p();
    let k = g_total + 1 + p;
    let rows = nodes.len() * t;
    let mut x = DMatrix::zeros(rows, k);
    let mut y = DVector::zeros(rows);
    for (pos, &i) in nodes.iter().enumerate() {
        let base = pos * t;
        for h in 0..g_total {
            let src = lags.get(i, h);
            x.column_mut(h).rows_mut(base, t).copy_from_slice(src);
        }
        x.column_mut(g_total).rows_mut(base, t).copy_from_slice(panel.lagged(i));
        for c in 0..p {
            x.column_mut(g_total + 1 + c).rows_mut(base, t).fill(panel.z()[(i, c)]);
        }
        y.rows_mut(base, t).copy_from_slice(panel.response(i));
    }
    (x, y)
}

/// Inner products of each node's series with the lags of its followees.
///
/// Node `i` has local index 0 and its followees indices `1..=n_i` in weight
/// row order; every quantity the sweep and the per-group solves need is a
/// combination of these, so neither touches length-`T` vectors.
#[derive(Debug, Clone)]
struct LocalGram {
    /// `⟨Y_a(t−1), Y_b(t−1)⟩` over local indices, row-major `u × u`.
    pl: Vec<f64>,
    /// `⟨Y_i(t), Y_a(t−1)⟩`.
    ry: Vec<f64>,
    /// `Σ_t Y_a(t−1)`.
    sl: Vec<f64>,
    /// `⟨Y_i(t), Y_i(t)⟩`.
    yy: f64,
    /// `Σ_t Y_i(t)`.
    sy: f64,
}

impl LocalGram {
    fn u(&self) -> usize {
        self.ry.len()
    }

    fn pl(&self, a: usize, b: usize) -> f64 {
        self.pl[a * self.u() + b]
    }
}

/// Label-independent data statistics shared by all restarts of a fit.
#[derive(Debug, Clone)]
struct DataGrams {
    nodes: Vec<LocalGram>,
    /// For follower `j` at position `k` of `w.column(i)`: local index of `i`
    /// within node `j`'s gram, `follower_pos[i][k]`.
    follower_pos: Vec<Vec<usize>>,
    t: usize,
}

/// Group aggregates of one node: `ys[k] = ⟨Y_i, Ỹ_ik⟩`, `ls[k] = ⟨Y_i(t−1), Ỹ_ik⟩`,
/// `os[k] = Σ_t Ỹ_ik`, `kk[k][l] = ⟨Ỹ_ik, Ỹ_il⟩`.
struct NodeAgg {
    ys: Vec<f64>,
    ls: Vec<f64>,
    os: Vec<f64>,
    kk: Vec<f64>,
}

impl DataGrams {
    fn new(panel: &Panel, w: &WeightMatrix) -> Self {
        let n = panel.n_nodes();
        let nodes = (0..n)
            .into_par_iter()
            .map(|i| {
                let (cols, _) = w.row(i);
                let locals: Vec<&[f64]> = std::iter::once(panel.lagged(i))
                    .chain(cols.iter().map(|&j| panel.lagged(j)))
                    .collect();
                let u = locals.len();
                let mut pl = vec![0.0; u * u];
                for a in 0..u {
                    for b in a..u {
                        let v = dot(locals[a], locals[b]);
                        pl[a * u + b] = v;
                        pl[b * u + a] = v;
                    }
                }
                let y = panel.response(i);
                LocalGram {
                    pl,
                    ry: locals.iter().map(|l| dot(y, l)).collect(),
                    sl: locals.iter().map(|l| l.iter().sum()).collect(),
                    yy: sum_sq(y),
                    sy: y.iter().sum(),
                }
            })
            .collect();
        let mut follower_pos: Vec<Vec<usize>> = (0..n).map(|i| Vec::with_capacity(w.column(i).0.len())).collect();
        for i in 0..n {
            for &j in w.column(i).0 {
                let pos = w
                    .row(j)
                    .0
                    .iter()
                    .position(|&c| c == i)
                    .expect("column entry has a row entry");
                follower_pos[i].push(pos + 1);
            }
        }
        DataGrams {
            nodes,
            follower_pos,
            t: panel.horizon(),
        }
    }

    fn aggregates(&self, w: &WeightMatrix, labels: &[usize], g: usize, i: usize) -> NodeAgg {
        let lg = &self.nodes[i];
        let (cols, vals) = w.row(i);
        let mut agg = NodeAgg {
            ys: vec![0.0; g],
            ls: vec![0.0; g],
            os: vec![0.0; g],
            kk: vec![0.0; g * g],
        };
        for (m, (&jm, &wm)) in cols.iter().zip(vals).enumerate() {
            let (km, lm) = (labels[jm], m + 1);
            agg.ys[km] += wm * lg.ry[lm];
            agg.ls[km] += wm * lg.pl(0, lm);
            agg.os[km] += wm * lg.sl[lm];
            for (m2, (&jm2, &wm2)) in cols.iter().zip(vals).enumerate() {
                agg.kk[km * g + labels[jm2]] += wm * wm2 * lg.pl(lm, m2 + 1);
            }
        }
        agg
    }

    /// `‖Y_i − ν_h Y_i(t−1) − fe − Σ_k β_hk Ỹ_ik‖²` from the aggregates.
    fn node_ss(&self, params: &GnarParams, i: usize, h: usize, fe: f64, agg: &NodeAgg) -> f64 {
        let lg = &self.nodes[i];
        let g = params.n_groups();
        let nu = params.nu[h];
        let (b, c, sl) = (lg.ry[0], lg.pl(0, 0), lg.sl[0]);
        let mut ss =
            lg.yy + nu * nu * c + fe * fe * self.t as f64 - 2.0 * nu * b - 2.0 * fe * lg.sy + 2.0 * nu * fe * sl;
        for k in 0..g {
            let bk = params.beta[(h, k)];
            if bk == 0.0 {
                continue;
            }
            ss += -2.0 * bk * agg.ys[k] + 2.0 * nu * bk * agg.ls[k] + 2.0 * fe * bk * agg.os[k];
            for l in 0..g {
                ss += bk * params.beta[(h, l)] * agg.kk[k * g + l];
            }
        }
        ss
    }

    /// Per-group normal equations at `mem`.
    fn group_gram(&self, panel: &Panel, w: &WeightMatrix, mem: &Membership, nodes: &[usize]) -> GroupGram {
        let g = mem.n_groups();
        let p = panel.p();
        let k = g + 1 + p;
        let t = self.t as f64;
        let mut xtx = vec![0.0; k * k];
        let mut xty = vec![0.0; k];
        let mut yty = 0.0;
        for &i in nodes {
            let lg = &self.nodes[i];
            let agg = self.aggregates(w, mem.labels(), g, i);
            let z = panel.z().row(i);
            for a in 0..g {
                for b in 0..g {
                    xtx[a * k + b] += agg.kk[a * g + b];
                }
                xtx[a * k + g] += agg.ls[a];
                for c in 0..p {
                    xtx[a * k + g + 1 + c] += z[c] * agg.os[a];
                }
                xty[a] += agg.ys[a];
            }
            xtx[g * k + g] += lg.pl(0, 0);
            for c in 0..p {
                xtx[g * k + g + 1 + c] += z[c] * lg.sl[0];
                for d in c..p {
                    xtx[(g + 1 + c) * k + g + 1 + d] += t * z[c] * z[d];
                }
                xty[g + 1 + c] += z[c] * lg.sy;
            }
            xty[g] += lg.ry[0];
            yty += lg.yy;
        }
        for a in 0..k {
            for b in 0..a {
                xtx[a * k + b] = xtx[b * k + a];
            }
        }
        GroupGram {
            dim: k,
            n_rows: nodes.len() * self.t,
            xtx,
            xty,
            yty,
        }
    }
}

/// Per-group stacked regressions for membership `mem` with `g` groups.
pub fn build_design(panel: &Panel, w: &WeightMatrix, mem: &Membership, g: usize) -> Result<DesignBlocks> {
    check_inputs(panel, w, mem)?;
    if mem.n_groups() != g {
        return Err(Error::Dimension(format!(
            "membership has {} groups, expected {g}",
            mem.n_groups()
        )));
    }
    let lags = NetworkLags::compute(panel, w, mem.labels(), g);
    let t = panel.horizon();
    let mut out = DesignBlocks {
        x: Vec::with_capacity(g),
        y: Vec::with_capacity(g),
        rows: Vec::with_capacity(g),
    };
    for grp in 0..g {
        let nodes = mem.members(grp);
        let (x, y) = group_design(panel, &lags, &nodes, g);
        out.rows
            .push(nodes.iter().flat_map(|&i| (1..=t).map(move |s| (i, s))).collect());
        out.x.push(x);
        out.y.push(y);
    }
    Ok(out)
}

/// Minimum-norm least-squares `ξ_g` for one group.
pub fn solve_group(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if x.nrows() == 0 {
        return Err(Error::EmptyGroup { group: 0 });
    }
    Ok(min_norm_lstsq(x, y).coef)
}

/// `Q` computed group-by-group from the stacked regressions.
pub fn loss_by_groups(params: &GnarParams, mem: &Membership, panel: &Panel, w: &WeightMatrix) -> Result<f64> {
    let g = params.n_groups();
    let d = build_design(panel, w, mem, g)?;
    let mut ss = 0.0;
    for grp in 0..g {
        let r = &d.y[grp] - &d.x[grp] * params.xi(grp);
        ss += r.norm_squared();
    }
    Ok(ss / (panel.n_nodes() * panel.horizon()) as f64)
}

/// Solve every non-empty group at membership `mem`; empty groups keep their
/// coefficients from `prev`. Well-conditioned groups are solved from their
/// normal equations, the rest by minimum-norm least squares on the design.
fn solve_all(
    panel: &Panel,
    w: &WeightMatrix,
    data: &DataGrams,
    mem: &Membership,
    prev: &GnarParams,
) -> (GnarParams, Vec<GroupGram>) {
    let g = mem.n_groups();
    let k = g + 1 + panel.p();
    let solved: Vec<Option<(DVector<f64>, GroupGram)>> = (0..g)
        .into_par_iter()
        .map(|grp| {
            let nodes = mem.members(grp);
            if nodes.is_empty() {
                return None;
            }
            let gram = data.group_gram(panel, w, mem, &nodes);
            let xi = gram_solve(&gram.xtx_matrix(), &gram.xty_vector()).unwrap_or_else(|| {
                let lags = NetworkLags::compute(panel, w, mem.labels(), g);
                let (x, y) = group_design(panel, &lags, &nodes, g);
                min_norm_lstsq(&x, &y).coef
            });
            Some((xi, gram))
        })
        .collect();
    let mut params = prev.clone();
    let mut grams = Vec::with_capacity(g);
    for (grp, s) in solved.into_iter().enumerate() {
        match s {
            Some((xi, gram)) => {
                params.set_xi(grp, &xi);
                grams.push(gram);
            }
            None => grams.push(GroupGram::empty(k)),
        }
    }
    (params, grams)
}

/// Closed-form fit at a fixed membership (the oracle estimator when `mem` is
/// the true labeling).
pub fn solve_at(panel: &Panel, w: &WeightMatrix, mem: &Membership) -> Result<FitResult> {
    check_inputs(panel, w, mem)?;
    let data = DataGrams::new(panel, w);
    let zero = GnarParams::zeros(mem.n_groups(), panel.p());
    let (params, grams) = solve_all(panel, w, &data, mem, &zero);
    let q = loss_direct(&params, mem.labels(), panel, w);
    Ok(FitResult {
        params,
        membership: mem.clone(),
        loss: q,
        loss_trace: vec![q],
        grams,
        converged: true,
        n_iterations: 0,
        init_index: 0,
        n_nodes: panel.n_nodes(),
        horizon: panel.horizon(),
        seed: None,
    })
}

/// Result of a membership update at fixed parameters.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub membership: Membership,
    pub changed: bool,
    pub sweeps: usize,
    /// Objective after the update.
    pub loss: f64,
}

/// Relative size, against the data energy of the nodes involved, below which
/// a loss decrease does not move a label.
pub const MOVE_TOL: f64 = 1e-12;

struct SweepState<'a> {
    params: &'a GnarParams,
    w: &'a WeightMatrix,
    data: &'a DataGrams,
    labels: Vec<usize>,
    /// `fe[i * G + h] = z_i' ζ_h`.
    fe: Vec<f64>,
}

impl SweepState<'_> {
    /// `⟨r_j, Y_i(t−1)⟩` for the current residual of follower `j`, where `i`
    /// sits at local index `pos` of `j`.
    fn follower_dot(&self, j: usize, pos: usize) -> f64 {
        let g = self.params.n_groups();
        let lg = &self.data.nodes[j];
        let gj = self.labels[j];
        let mut d = lg.ry[pos] - self.params.nu[gj] * lg.pl(0, pos) - self.fe[j * g + gj] * lg.sl[pos];
        let (cols, vals) = self.w.row(j);
        for (m, (&jm, &wm)) in cols.iter().zip(vals).enumerate() {
            d -= self.params.beta[(gj, self.labels[jm])] * wm * lg.pl(m + 1, pos);
        }
        d
    }

    /// Visit node `i`; returns whether its label moved.
    fn visit(&mut self, i: usize) -> bool {
        let g = self.params.n_groups();
        let cur = self.labels[i];
        let agg = self.data.aggregates(self.w, &self.labels, g, i);
        let (followers, fw) = self.w.column(i);
        let pos = &self.data.follower_pos[i];
        let dots: Vec<f64> = followers
            .iter()
            .zip(pos)
            .map(|(&j, &p)| self.follower_dot(j, p))
            .collect();
        let yy = self.data.nodes[i].pl(0, 0);
        let energy = self.data.nodes[i].yy + followers.iter().map(|&j| self.data.nodes[j].yy).sum::<f64>();
        let eps = MOVE_TOL * energy;
        let cur_ss = self.data.node_ss(self.params, i, cur, self.fe[i * g + cur], &agg);

        let mut best: Option<(usize, f64)> = None;
        for h in 0..g {
            if h == cur {
                continue;
            }
            let mut delta = self.data.node_ss(self.params, i, h, self.fe[i * g + h], &agg) - cur_ss;
            for ((&j, &wji), &dot) in followers.iter().zip(fw).zip(&dots) {
                let gj = self.labels[j];
                let c = (self.params.beta[(gj, h)] - self.params.beta[(gj, cur)]) * wji;
                delta += c * c * yy - 2.0 * c * dot;
            }
            if delta < -eps && best.is_none_or(|(_, d)| delta < d) {
                best = Some((h, delta));
            }
        }
        match best {
            Some((h, _)) => {
                self.labels[i] = h;
                true
            }
            None => false,
        }
    }
}

/// Sequential membership update at fixed parameters.
///
/// Nodes are visited in order; each moves to the label minimizing the full
/// objective given the current labels of all other nodes (earlier nodes
/// already updated). A label only moves when the objective drops by more
/// than [`MOVE_TOL`] times the data energy of the node and its followers;
/// among equal improvements the smallest group index wins. Sweeps repeat until
/// one full pass changes nothing or `opts.max_sweeps` is reached.
pub fn update_memberships(
    params: &GnarParams,
    mem: &Membership,
    panel: &Panel,
    w: &WeightMatrix,
    opts: &FitOptions,
) -> Result<SweepOutcome> {
    check_inputs(panel, w, mem)?;
    if mem.n_groups() != params.n_groups() {
        return Err(Error::Dimension("membership and parameters disagree on G".into()));
    }
    let data = DataGrams::new(panel, w);
    let out = sweep(params, mem, panel, w, &data, opts)?;
    Ok(SweepOutcome {
        loss: loss_direct(params, out.membership.labels(), panel, w),
        ..out
    })
}

/// The sweep itself; `loss` is left as NaN.
fn sweep(
    params: &GnarParams,
    mem: &Membership,
    panel: &Panel,
    w: &WeightMatrix,
    data: &DataGrams,
    opts: &FitOptions,
) -> Result<SweepOutcome> {
    let g = params.n_groups();
    let mut state = SweepState {
        params,
        w,
        data,
        labels: mem.labels().to_vec(),
        fe: (0..panel.n_nodes())
            .flat_map(|i| (0..g).map(move |h| fixed_effect(params, panel, i, h)))
            .collect(),
    };
    let mut changed = false;
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps.max(1) {
        sweeps += 1;
        let mut moved = false;
        for i in 0..panel.n_nodes() {
            moved |= state.visit(i);
        }
        changed |= moved;
        if !moved {
            break;
        }
    }
    Ok(SweepOutcome {
        loss: f64::NAN,
        membership: Membership::new(state.labels, g)?,
        changed,
        sweeps,
    })
}

enum RestartEnd {
    Finished(FitResult, Vec<Vec<usize>>),
    /// Reached a membership already explored by an earlier restart.
    Duplicate(Vec<Vec<usize>>),
}

fn run_restart(
    panel: &Panel,
    w: &WeightMatrix,
    data: &DataGrams,
    init: &Membership,
    opts: &FitOptions,
    seen: Option<&HashSet<Vec<usize>>>,
) -> Result<RestartEnd> {
    let g = init.n_groups();
    let mut mem = init.clone();
    let zero = GnarParams::zeros(g, panel.p());
    let (mut params, mut grams) = solve_all(panel, w, data, &mem, &zero);
    let mut q = loss_direct(&params, mem.labels(), panel, w);
    let mut trace = vec![q];
    let mut visited = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        // with no empty group the parameters are a function of the labels,
        // so the rest of the trajectory is too
        if mem.counts().iter().all(|&c| c > 0) {
            let key = mem.canonical().labels().to_vec();
            if seen.is_some_and(|s| s.contains(&key)) {
                return Ok(RestartEnd::Duplicate(visited));
            }
            visited.push(key);
        }
        iterations += 1;
        let step = sweep(&params, &mem, panel, w, data, opts)?;
        if !step.changed {
            converged = true;
            break;
        }
        mem = step.membership;
        let (p, gr) = solve_all(panel, w, data, &mem, &params);
        params = p;
        grams = gr;
        let q_new = loss_direct(&params, mem.labels(), panel, w);
        trace.push(q_new);
        q = q_new;
        if !q.is_finite() {
            break;
        }
    }

    Ok(RestartEnd::Finished(
        FitResult {
            params,
            membership: mem,
            loss: q,
            loss_trace: trace,
            grams,
            converged,
            n_iterations: iterations,
            init_index: 0,
            n_nodes: panel.n_nodes(),
            horizon: panel.horizon(),
            seed: None,
        },
        visited,
    ))
}

/// Alternating minimization from every membership in `pool`; returns the
/// restart with the smallest final loss (earliest index on ties).
///
/// Restarts run in pool order. Once a restart reaches a membership that an
/// earlier restart already passed through, it would retrace that restart's
/// path, so it is dropped.
pub fn fit(panel: &Panel, w: &WeightMatrix, g: usize, pool: &[Membership], opts: &FitOptions) -> Result<FitResult> {
    if pool.is_empty() {
        return Err(Error::Invalid("initial membership pool is empty".into()));
    }
    if let Some(bad) = pool.iter().find(|m| m.n_groups() != g) {
        return Err(Error::Dimension(format!(
            "pool membership has {} groups, expected {g}",
            bad.n_groups()
        )));
    }
    for init in pool {
        check_inputs(panel, w, init)?;
    }
    let data = DataGrams::new(panel, w);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut best: Option<FitResult> = None;
    for (idx, init) in pool.iter().enumerate() {
        match run_restart(panel, w, &data, init, opts, Some(&seen))? {
            RestartEnd::Finished(mut res, visited) => {
                seen.extend(visited);
                if !res.loss.is_finite() {
                    continue;
                }
                res.init_index = idx;
                if best.as_ref().is_none_or(|b| res.loss < b.loss) {
                    best = Some(res);
                }
            }
            RestartEnd::Duplicate(visited) => seen.extend(visited),
        }
    }
    best.ok_or(Error::NoFiniteFit)
}

/// Alternating minimization from a single membership, without restart
/// bookkeeping.
pub fn fit_from(panel: &Panel, w: &WeightMatrix, init: &Membership, opts: &FitOptions) -> Result<FitResult> {
    check_inputs(panel, w, init)?;
    let data = DataGrams::new(panel, w);
    match run_restart(panel, w, &data, init, opts, None)? {
        RestartEnd::Finished(res, _) if res.loss.is_finite() => Ok(res),
        _ => Err(Error::NoFiniteFit),
    }
}
