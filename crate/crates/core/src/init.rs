//! Initial memberships for the alternating algorithm.
//!
//! Every node gets its own ridge regression on centered data, which yields
//! per-neighbor network effects `b̂_ij`, a momentum `v̂_i` and a fixed-effect
//! level `f̂_i`. Three k-means schemes then turn these into candidate
//! memberships: clustering `v̂`, clustering `f̂`, and clustering
//! `(v̂_i, b̃_i)`, where `b̃_i` summarizes `b̂_i` by a preliminary `G²`-means
//! over all network-effect estimates.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::spd_solve;
use crate::model::{Membership, Panel};
use crate::net::WeightMatrix;
use crate::rng;

/// Ridge estimates for one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEstimate {
    /// Coefficients on `w_ij Y_j(t−1)`, one per followee in row order.
    pub b: Vec<f64>,
    pub v: f64,
    pub f: f64,
}

#[derive(Debug, Clone)]
pub struct NodeEstimates {
    pub nodes: Vec<NodeEstimate>,
}

/// `0.01 · Σ_t ‖x_t‖² / (n_i + 1) + 1e-6`.
pub fn ridge_lambda(sum_sq_norm: f64, n_i: usize) -> f64 {
    0.01 * sum_sq_norm / (n_i + 1) as f64 + 1e-6
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Ridge regression of node `i`'s centered response on its centered,
/// weighted followee lags and its own centered lag.
pub fn node_ridge(panel: &Panel, w: &WeightMatrix, i: usize) -> Result<NodeEstimate> {
    let t = panel.horizon();
    if t < 2 {
        return Err(Error::Invalid(format!("node regressions need T >= 2, got {t}")));
    }
    let (cols, vals) = w.row(i);
    let k = cols.len() + 1;
    let resp = panel.response(i);
    let y_bar = mean(resp);
    let lag_bars: Vec<f64> = cols.iter().map(|&j| mean(panel.lagged(j))).collect();
    let own_lag_bar = mean(panel.lagged(i));

    // design stored column-major: column c holds regressor c over time
    let mut x = DMatrix::zeros(t, k);
    for (c, (&j, &wij)) in cols.iter().zip(vals).enumerate() {
        for (s, &yl) in panel.lagged(j).iter().enumerate() {
            x[(s, c)] = wij * (yl - lag_bars[c]);
        }
    }
    for (s, &yl) in panel.lagged(i).iter().enumerate() {
        x[(s, k - 1)] = yl - own_lag_bar;
    }
    let y = DVector::from_iterator(t, resp.iter().map(|v| v - y_bar));

    let lambda = ridge_lambda(x.norm_squared(), cols.len());
    let mut a = x.tr_mul(&x);
    for d in 0..k {
        a[(d, d)] += lambda;
    }
    let coef = spd_solve(&a, &x.tr_mul(&y));

    let b: Vec<f64> = coef.iter().take(k - 1).copied().collect();
    let v = coef[k - 1];
    let net_level: f64 = b
        .iter()
        .zip(vals)
        .zip(&lag_bars)
        .map(|((bj, wij), ybar)| bj * wij * ybar)
        .sum();
    Ok(NodeEstimate {
        b,
        v,
        f: y_bar - net_level - v * own_lag_bar,
    })
}

pub fn node_estimates(panel: &Panel, w: &WeightMatrix) -> Result<NodeEstimates> {
    let nodes = (0..panel.n_nodes())
        .into_par_iter()
        .map(|i| node_ridge(panel, w, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(NodeEstimates { nodes })
}

const KMEANS_MAX_ITER: usize = 300;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm on the rows of `points` (row-major, `d` columns).
///
/// Centers start at `k` distinct random rows. A cluster that empties is
/// re-seeded with the point farthest from its current center. Assignment
/// ties go to the lower cluster index.
pub fn kmeans<R: Rng + ?Sized>(points: &[f64], d: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if d == 0 || !points.len().is_multiple_of(d) {
        return Err(Error::Dimension(format!(
            "{} values do not form rows of width {d}",
            points.len()
        )));
    }
    let m = points.len() / d;
    if k == 0 || m < k {
        return Err(Error::Invalid(format!(
            "k-means needs 1 <= k <= M, got k = {k}, M = {m}"
        )));
    }
    let row = |r: usize| &points[r * d..(r + 1) * d];
    let mut centers: Vec<f64> = sample(rng, m, k).into_iter().flat_map(|r| row(r).to_vec()).collect();
    let mut labels = vec![usize::MAX; m];

    for _ in 0..KMEANS_MAX_ITER {
        let mut moved = false;
        for (r, lab) in labels.iter_mut().enumerate() {
            let p = row(r);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(p, &centers[c * d..(c + 1) * d]);
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if *lab != best {
                *lab = best;
                moved = true;
            }
        }

        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let far = (0..m)
                .filter(|&r| counts[labels[r]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(row(a), &centers[labels[a] * d..(labels[a] + 1) * d]);
                    let db = sq_dist(row(b), &centers[labels[b] * d..(labels[b] + 1) * d]);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("M >= k leaves a cluster with two points");
            counts[labels[far]] -= 1;
            labels[far] = empty;
            counts[empty] = 1;
            moved = true;
        }

        centers.iter_mut().for_each(|c| *c = 0.0);
        for (r, &l) in labels.iter().enumerate() {
            for (c, &v) in centers[l * d..(l + 1) * d].iter_mut().zip(row(r)) {
                *c += v;
            }
        }
        for (l, &n) in counts.iter().enumerate() {
            centers[l * d..(l + 1) * d].iter_mut().for_each(|c| *c /= n as f64);
        }
        if !moved {
            break;
        }
    }
    Ok(labels)
}

/// Per-node `b̃_i ∈ R^{G²}`: the mean of `b̂_ij` over followees whose estimate
/// fell in pooled cluster `l`, or 0 when none did.
pub fn network_effect_summary(est: &NodeEstimates, pooled_labels: &[usize], g: usize) -> Vec<Vec<f64>> {
    let k = g * g;
    let mut offset = 0;
    est.nodes
        .iter()
        .map(|node| {
            let mut sums = vec![0.0; k];
            let mut counts = vec![0usize; k];
            for (&b, &l) in node.b.iter().zip(&pooled_labels[offset..offset + node.b.len()]) {
                sums[l] += b;
                counts[l] += 1;
            }
            offset += node.b.len();
            sums.iter()
                .zip(&counts)
                .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
                .collect()
        })
        .collect()
}

/// The three candidate memberships for one restart seed.
pub fn init_candidates(est: &NodeEstimates, g: usize, seed: u64) -> Result<[Membership; 3]> {
    let n = est.nodes.len();
    let mut r = rng::rng_from(seed);
    let v: Vec<f64> = est.nodes.iter().map(|e| e.v).collect();
    let f: Vec<f64> = est.nodes.iter().map(|e| e.f).collect();
    let by_v = kmeans(&v, 1, g, &mut r)?;
    let by_f = kmeans(&f, 1, g, &mut r)?;

    let pooled: Vec<f64> = est.nodes.iter().flat_map(|e| e.b.iter().copied()).collect();
    let k_inner = (g * g).min(pooled.len());
    let pooled_labels = kmeans(&pooled, 1, k_inner.max(1), &mut r)?;
    let summary = network_effect_summary(est, &pooled_labels, g);
    let stacked: Vec<f64> = (0..n)
        .flat_map(|i| std::iter::once(v[i]).chain(summary[i].iter().copied()))
        .collect();
    let by_net = kmeans(&stacked, 1 + g * g, g, &mut r)?;

    Ok([
        Membership::new(by_v, g)?,
        Membership::new(by_f, g)?,
        Membership::new(by_net, g)?,
    ])
}

/// Pool of `3 · restarts` candidate memberships, with duplicates (up to a
/// relabeling of groups) removed. Order follows restart index, then scheme.
pub fn init_pool(panel: &Panel, w: &WeightMatrix, g: usize, restarts: usize, seed: u64) -> Result<Vec<Membership>> {
    if g == 0 {
        return Err(Error::Invalid("G must be at least 1".into()));
    }
    if panel.n_nodes() < g {
        return Err(Error::Invalid(format!(
            "cannot form {g} groups from {} nodes",
            panel.n_nodes()
        )));
    }
    let est = node_estimates(panel, w)?;
    let candidates = (0..restarts.max(1) as u64)
        .into_par_iter()
        .map(|r| init_candidates(&est, g, rng::derive_seed(seed, rng::STREAM_INIT, r)))
        .collect::<Result<Vec<_>>>()?;
    let mut seen = HashSet::new();
    Ok(candidates
        .into_iter()
        .flatten()
        .filter(|m| seen.insert(m.canonical().labels().to_vec()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{simulate, GnarParams, NoiseSpec, SimulateOptions};
    use crate::net::{gen_sbm, row_normalize, Network};
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, Normal};

    fn pair_network() -> WeightMatrix {
        row_normalize(&Network::from_edges(2, &[(0, 1), (1, 0)]).unwrap()).unwrap()
    }

    #[test]
    fn constant_series_give_zero_effects() {
        let y = DMatrix::from_element(2, 6, 3.5);
        let panel = Panel::new(&y, DMatrix::zeros(2, 0)).unwrap();
        let e = node_ridge(&panel, &pair_network(), 0).unwrap();
        assert_eq!(e.b, vec![0.0]);
        assert_eq!(e.v, 0.0);
        assert_relative_eq!(e.f, 3.5, epsilon = 1e-14);
    }

    #[test]
    fn lambda_floor() {
        assert_eq!(ridge_lambda(0.0, 3), 1e-6);
        assert_relative_eq!(ridge_lambda(40.0, 3), 0.1 + 1e-6);
    }

    #[test]
    fn short_panel_rejected() {
        let panel = Panel::new(&DMatrix::from_element(2, 2, 1.0), DMatrix::zeros(2, 0)).unwrap();
        assert!(node_ridge(&panel, &pair_network(), 0).is_err());
    }

    #[test]
    fn ridge_is_close_to_least_squares_on_noiseless_ar() {
        let params = GnarParams::new(
            DMatrix::from_element(1, 1, 0.3),
            DVector::from_element(1, 0.5),
            DMatrix::from_element(1, 1, 0.7),
        )
        .unwrap();
        let w = pair_network();
        let mem = Membership::constant(2, 1);
        let z = DMatrix::from_column_slice(2, 1, &[1.0, -2.0]);
        let mut opts = SimulateOptions::new(400);
        opts.burn_in = 0;
        opts.initial = Some(vec![5.0, -3.0]);
        let panel = simulate(&params, &mem, &w, &z, NoiseSpec::zero(), &opts, 0).unwrap();
        let e = node_ridge(&panel, &w, 0).unwrap();

        // unregularized centered least squares as the oracle
        let t = panel.horizon();
        let lag1 = panel.lagged(1);
        let lag0 = panel.lagged(0);
        let (m1, m0, my) = (mean(lag1), mean(lag0), mean(panel.response(0)));
        let x = DMatrix::from_fn(t, 2, |s, c| if c == 0 { lag1[s] - m1 } else { lag0[s] - m0 });
        let y = DVector::from_fn(t, |s, _| panel.response(0)[s] - my);
        let a = x.tr_mul(&x);
        let ls = a.clone().cholesky().unwrap().solve(&x.tr_mul(&y));
        // ridge shrinkage: c_ridge - c_ls = -λ (A + λI)⁻¹ c_ls
        let lambda = ridge_lambda(x.norm_squared(), 1);
        let s_min = a.symmetric_eigenvalues().min();
        let bound = lambda / (s_min + lambda) * ls.norm();
        let diff = DVector::from_vec(vec![e.b[0] - ls[0], e.v - ls[1]]);
        assert!(diff.norm() <= bound * (1.0 + 1e-9), "{} > {bound}", diff.norm());
        assert!(diff.norm() > 0.0);
        assert_relative_eq!(ls[0], 0.3, epsilon = 1e-8);
    }

    #[test]
    fn ridge_satisfies_normal_equations() {
        let net = gen_sbm(10, 2, 4).unwrap();
        let w = row_normalize(&net).unwrap();
        let mut r = rng::rng_from(1);
        let y = DMatrix::from_fn(10, 9, |_, _| Normal::new(0.0, 1.0).unwrap().sample(&mut r));
        let panel = Panel::new(&y, DMatrix::zeros(10, 0)).unwrap();
        for i in 0..10 {
            let e = node_ridge(&panel, &w, i).unwrap();
            let (cols, vals) = w.row(i);
            let t = panel.horizon();
            let k = cols.len() + 1;
            let mut x = DMatrix::zeros(t, k);
            for (c, (&j, &wij)) in cols.iter().zip(vals).enumerate() {
                let m = mean(panel.lagged(j));
                for s in 0..t {
                    x[(s, c)] = wij * (panel.lagged(j)[s] - m);
                }
            }
            let m = mean(panel.lagged(i));
            for s in 0..t {
                x[(s, k - 1)] = panel.lagged(i)[s] - m;
            }
            let ybar = mean(panel.response(i));
            let yc = DVector::from_fn(t, |s, _| panel.response(i)[s] - ybar);
            assert_relative_eq!(yc.sum(), 0.0, epsilon = 1e-12);
            let lambda = ridge_lambda(x.norm_squared(), cols.len());
            let a = x.tr_mul(&x) + DMatrix::identity(k, k) * lambda;
            let coef = DVector::from_iterator(k, e.b.iter().copied().chain([e.v]));
            let rhs = x.tr_mul(&yc);
            assert!((&a * &coef - &rhs).norm() <= 1e-10 * rhs.norm().max(1.0));
        }
    }

    #[test]
    fn kmeans_separates_clusters() {
        let pts = [0.0, 10.0, 0.01, 10.01];
        let mut r = rng::rng_from(3);
        let l = kmeans(&pts, 1, 2, &mut r).unwrap();
        assert_eq!(l[0], l[2]);
        assert_eq!(l[1], l[3]);
        assert_ne!(l[0], l[1]);
    }

    #[test]
    fn kmeans_k_equals_m() {
        let pts = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut r = rng::rng_from(0);
        let mut l = kmeans(&pts, 2, 3, &mut r).unwrap();
        l.sort();
        assert_eq!(l, vec![0, 1, 2]);
    }

    #[test]
    fn kmeans_rejects_too_few_points() {
        let mut r = rng::rng_from(0);
        assert!(kmeans(&[1.0, 2.0], 1, 3, &mut r).is_err());
    }

    #[test]
    fn kmeans_recovers_planted_clusters() {
        let centers = [[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]];
        let mut total_err = 0.0;
        for seed in 0..100 {
            let mut r = rng::rng_from(seed);
            let nd = Normal::new(0.0, 1.0).unwrap();
            let truth: Vec<usize> = (0..60).map(|i| i % 3).collect();
            let pts: Vec<f64> = truth
                .iter()
                .flat_map(|&c| [centers[c][0] + nd.sample(&mut r), centers[c][1] + nd.sample(&mut r)])
                .collect();
            let l = kmeans(&pts, 2, 3, &mut r).unwrap();
            // best of the 6 label permutations
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let err = perms
                .iter()
                .map(|p| truth.iter().zip(&l).filter(|(&t, &e)| p[e] != t).count())
                .min()
                .unwrap();
            total_err += err as f64 / 60.0;
        }
        assert!(total_err / 100.0 < 0.05);
    }

    #[test]
    fn summary_fills_empty_cells_with_zero() {
        let est = NodeEstimates {
            nodes: vec![
                NodeEstimate {
                    b: vec![1.0, 3.0],
                    v: 0.0,
                    f: 0.0,
                },
                NodeEstimate {
                    b: vec![5.0],
                    v: 0.0,
                    f: 0.0,
                },
            ],
        };
        let s = network_effect_summary(&est, &[0, 0, 2], 2);
        assert_eq!(s[0], vec![2.0, 0.0, 0.0, 0.0]);
        assert_eq!(s[1], vec![0.0, 0.0, 5.0, 0.0]);
    }

    #[test]
    fn single_group_pool_is_constant() {
        let net = gen_sbm(20, 2, 1).unwrap();
        let w = row_normalize(&net).unwrap();
        let mut r = rng::rng_from(2);
        let y = DMatrix::from_fn(20, 8, |_, _| r.random::<f64>());
        let panel = Panel::new(&y, DMatrix::zeros(20, 0)).unwrap();
        let pool = init_pool(&panel, &w, 1, 5, 9).unwrap();
        assert_eq!(pool, vec![Membership::constant(20, 1)]);
    }

    #[test]
    fn pool_is_deterministic_and_deduplicated() {
        let net = gen_sbm(30, 3, 1).unwrap();
        let w = row_normalize(&net).unwrap();
        let mut r = rng::rng_from(2);
        let y = DMatrix::from_fn(30, 12, |_, _| r.random::<f64>());
        let panel = Panel::new(&y, DMatrix::zeros(30, 0)).unwrap();
        let a = init_pool(&panel, &w, 3, 10, 4).unwrap();
        let b = init_pool(&panel, &w, 3, 10, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 30);
        let keys: HashSet<_> = a.iter().map(|m| m.canonical().labels().to_vec()).collect();
        assert_eq!(keys.len(), a.len());
    }
}
