//! Directed follower networks, their row-normalized weights, random
//! generators and structural diagnostics.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, STREAM_NETWORK};

/// Binary directed adjacency `a_ij` (`i` follows `j`), stored as sorted
/// out-neighbor lists. Self-loops are rejected at construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Network {
    out: Vec<Vec<usize>>,
}

impl Network {
    /// Empty network on `n` nodes.
    pub fn empty(n: usize) -> Self {
        Network {
            out: vec![Vec::new(); n],
        }
    }

    /// Build from 0-based `(from, to)` pairs. Duplicates collapse.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut net = Network::empty(n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Invalid(format!(
                    "edge ({}, {}) out of range for {} nodes",
                    i + 1,
                    j + 1,
                    n
                )));
            }
            if i == j {
                return Err(Error::Invalid(format!("self-loop on node {}", i + 1)));
            }
            net.out[i].push(j);
        }
        net.normalize_lists();
        Ok(net)
    }

    /// Build from a dense 0/1 matrix. Nonzero diagonal entries are rejected.
    pub fn from_dense(a: &DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Dimension("adjacency must be square".into()));
        }
        let mut edges = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                let v = a[(i, j)];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Invalid(format!("a[{i}][{j}] = {v} is not binary")));
                }
                if v == 1.0 {
                    edges.push((i, j));
                }
            }
        }
        Self::from_edges(a.nrows(), &edges)
    }

    fn normalize_lists(&mut self) {
        for row in &mut self.out {
            row.sort_unstable();
            row.dedup();
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.out.len()
    }

    /// Nodes followed by `i` (the set 𝒩_i), ascending.
    pub fn followees(&self, i: usize) -> &[usize] {
        &self.out[i]
    }

    pub fn out_degree(&self) -> Vec<usize> {
        self.out.iter().map(Vec::len).collect()
    }

    pub fn n_edges(&self) -> usize {
        self.out.iter().map(Vec::len).sum()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.out[i].binary_search(&j).is_ok()
    }

    /// 0-based edge list in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.out
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&j| (i, j)))
            .collect()
    }

    pub fn adjacency_dense(&self) -> DMatrix<f64> {
        let n = self.n_nodes();
        let mut a = DMatrix::zeros(n, n);
        for (i, j) in self.edges() {
            a[(i, j)] = 1.0;
        }
        a
    }

    /// Give every node with no out-edge one edge to a uniformly chosen other
    /// node. Returns the repaired node ids.
    pub fn repair_isolated<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        let n = self.n_nodes();
        let mut fixed = Vec::new();
        if n < 2 {
            return fixed;
        }
        for i in 0..n {
            if self.out[i].is_empty() {
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                self.out[i].push(j);
                fixed.push(i);
            }
        }
        fixed
    }
}

/// Row-normalized weights `w_ij = a_ij / n_i` in compressed sparse row form,
/// with the transposed (follower) structure cached alongside.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    // transpose: for column j, the rows i with w_ij > 0
    col_ptr: Vec<usize>,
    col_rows: Vec<usize>,
    col_vals: Vec<f64>,
}

impl WeightMatrix {
    pub fn n_nodes(&self) -> usize {
        self.n
    }

    /// `(j, w_ij)` for the followees of `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    /// `(i, w_ij)` for the followers of `j`, i.e. the nodes whose loss depends
    /// on `j`'s label.
    pub fn column(&self, j: usize) -> (&[usize], &[f64]) {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        (&self.col_rows[r.clone()], &self.col_vals[r])
    }

    pub fn row_degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                w[(i, j)] = v;
            }
        }
        w
    }

    /// `out = W x`.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            out[i] = cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum();
        }
    }

    /// `out = Wᵀ x`.
    pub fn tr_mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for j in 0..self.n {
            let (rows, vals) = self.column(j);
            out[j] = rows.iter().zip(vals).map(|(&i, &v)| v * x[i]).sum();
        }
    }
}

/// `w_ij = a_ij / n_i`. Fails on the first node without out-edges.
pub fn row_normalize(net: &Network) -> Result<WeightMatrix> {
    let n = net.n_nodes();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(net.n_edges());
    let mut vals = Vec::with_capacity(net.n_edges());
    row_ptr.push(0);
    for i in 0..n {
        let f = net.followees(i);
        if f.is_empty() {
            return Err(Error::IsolatedNode { node: i + 1 });
        }
        let w = 1.0 / f.len() as f64;
        cols.extend_from_slice(f);
        vals.extend(std::iter::repeat_n(w, f.len()));
        row_ptr.push(cols.len());
    }

    let mut counts = vec![0usize; n + 1];
    for &j in &cols {
        counts[j + 1] += 1;
    }
    for j in 0..n {
        counts[j + 1] += counts[j];
    }
    let col_ptr = counts.clone();
    let mut next = counts;
    let mut col_rows = vec![0; cols.len()];
    let mut col_vals = vec![0.0; cols.len()];
    for i in 0..n {
        for k in row_ptr[i]..row_ptr[i + 1] {
            let j = cols[k];
            col_rows[next[j]] = i;
            col_vals[next[j]] = vals[k];
            next[j] += 1;
        }
    }
    Ok(WeightMatrix {
        n,
        row_ptr,
        cols,
        vals,
        col_ptr,
        col_rows,
        col_vals,
    })
}

/// Contiguous community assignment: `floor(n / c)` nodes each, the remainder
/// going one apiece to the first communities.
pub fn sbm_communities(n: usize, c: usize) -> Vec<usize> {
    let base = n / c;
    let extra = n % c;
    let mut out = Vec::with_capacity(n);
    for k in 0..c {
        let size = base + usize::from(k < extra);
        out.extend(std::iter::repeat_n(k, size));
    }
    out
}

/// Edge probabilities `(within, across)` of the SBM design: `2 log N / N` and
/// `log N / N`, clipped to `[0, 1]`.
pub fn sbm_probabilities(n: usize) -> (f64, f64) {
    let nf = n as f64;
    let across = (nf.ln() / nf).clamp(0.0, 1.0);
    ((2.0 * across).clamp(0.0, 1.0), across)
}

/// Stochastic block model with `c` communities. Every ordered pair `i != j`
/// is an independent Bernoulli draw; nodes left without followees are repaired.
pub fn gen_sbm(n: usize, c: usize, seed: u64) -> Result<Network> {
    if c == 0 || n < c {
        return Err(Error::Invalid(format!("SBM needs n >= c >= 1, got n = {n}, c = {c}")));
    }
    let comm = sbm_communities(n, c);
    let (p_in, p_out) = sbm_probabilities(n);
    let mut rng = rng::child_rng(seed, STREAM_NETWORK, 0);
    let mut net = Network::empty(n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let p = if comm[i] == comm[j] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                net.out[i].push(j);
            }
        }
    }
    net.repair_isolated(&mut rng);
    net.normalize_lists();
    Ok(net)
}

pub const POWERLAW_EXPONENT: f64 = 2.5;
pub const POWERLAW_SCALE: usize = 4;

/// Probabilities `P(k) ∝ k^-2.5` for `k = 1..=k_cap`.
pub fn powerlaw_pmf(k_cap: usize) -> Vec<f64> {
    let raw: Vec<f64> = (1..=k_cap).map(|k| (k as f64).powf(-POWERLAW_EXPONENT)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Power-law in-degree network. Node `i` draws `d̃_i` from [`powerlaw_pmf`]
/// with support `1..=n`, receives `min(4 d̃_i, n - 1)` distinct followers
/// chosen uniformly among the other nodes, then isolated nodes are repaired.
pub fn gen_powerlaw(n: usize, seed: u64) -> Result<Network> {
    if n < 5 {
        return Err(Error::Invalid(format!("power-law network needs n >= 5, got {n}")));
    }
    let pmf = powerlaw_pmf(n);
    let dist = WeightedIndex::new(&pmf).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut rng = rng::child_rng(seed, STREAM_NETWORK, 1);
    let mut net = Network::empty(n);
    for i in 0..n {
        let d_tilde = dist.sample(&mut rng) + 1;
        let d = (POWERLAW_SCALE * d_tilde).min(n - 1);
        for idx in rand::seq::index::sample(&mut rng, n - 1, d) {
            let j = if idx >= i { idx + 1 } else { idx };
            net.out[j].push(i);
        }
    }
    net.repair_isolated(&mut rng);
    net.normalize_lists();
    Ok(net)
}

/// Structural summaries of a network and its weight matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetDiagnostics {
    /// Stationary distribution `p_N` of the chain with transition matrix `W`.
    pub stationary_dist: Vec<f64>,
    /// `p_Nᵀ p_N`.
    pub r_p: f64,
    /// Largest singular value of `W + Wᵀ`.
    pub sigma_max_sym: f64,
    pub mean_degree: f64,
    pub max_degree: usize,
    /// 90% quantile of out-degrees (linear interpolation between order statistics).
    pub degree_q90: f64,
    /// `false` when the stationary-distribution iteration hit its budget.
    pub converged: bool,
    /// `‖Wᵀ p_N − p_N‖_∞` at the returned iterate.
    pub stationary_residual: f64,
    pub iterations: usize,
}

pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITER: usize = 10_000;

/// Quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn diagnostics(net: &Network, w: &WeightMatrix) -> NetDiagnostics {
    let n = net.n_nodes();
    let deg: Vec<f64> = net.out_degree().iter().map(|&d| d as f64).collect();
    let mean_degree = deg.iter().sum::<f64>() / n as f64;
    let max_degree = net.out_degree().into_iter().max().unwrap_or(0);
    let degree_q90 = quantile(&deg, 0.9);

    // Lazy chain (I + W)/2 has the same stationary law and is aperiodic, so
    // the iteration also settles on periodic irreducible chains.
    let mut p = vec![1.0 / n as f64; n];
    let mut wp = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=POWER_MAX_ITER {
        iterations = it;
        w.tr_mul_vec(&p, &mut wp);
        let mut delta: f64 = 0.0;
        for k in 0..n {
            let next = 0.5 * (p[k] + wp[k]);
            delta += (next - p[k]).abs();
            p[k] = next;
        }
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        if delta <= POWER_TOL {
            converged = true;
            break;
        }
    }
    w.tr_mul_vec(&p, &mut wp);
    let stationary_residual = p.iter().zip(&wp).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let r_p = p.iter().map(|v| v * v).sum();

    NetDiagnostics {
        stationary_dist: p,
        r_p,
        sigma_max_sym: sigma_max_symmetrized(w),
        mean_degree,
        max_degree,
        degree_q90,
        converged,
        stationary_residual,
        iterations,
    }
}

/// Power iteration on `M²` with `M = W + Wᵀ`.
fn sigma_max_symmetrized(w: &WeightMatrix) -> f64 {
    let n = w.n_nodes();
    let apply = |x: &[f64], out: &mut [f64], tmp: &mut [f64]| {
        w.mul_vec(x, out);
        w.tr_mul_vec(x, tmp);
        for k in 0..n {
            out[k] += tmp[k];
        }
    };
    // deterministic start with no special symmetry
    let mut v: Vec<f64> = (0..n).map(|k| 1.0 + ((k * 7919) % 101) as f64 / 1000.0).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut mv = vec![0.0; n];
    let mut mmv = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut sigma = 0.0;
    for _ in 0..POWER_MAX_ITER {
        apply(&v, &mut mv, &mut tmp);
        let s_new = mv.iter().map(|x| x * x).sum::<f64>().sqrt();
        apply(&mv, &mut mmv, &mut tmp);
        let nn = mmv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nn == 0.0 {
            return 0.0;
        }
        for k in 0..n {
            v[k] = mmv[k] / nn;
        }
        let done = (s_new - sigma).abs() <= 1e-13 * s_new.max(1.0);
        sigma = s_new;
        if done {
            break;
        }
    }
    apply(&v, &mut mv, &mut tmp);
    mv.iter().map(|x| x * x).sum::<f64>().sqrt()
}
