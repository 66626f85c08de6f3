//! Model parameters, memberships, panels and forward simulation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::WeightMatrix;
use crate::rng::{self, STREAM_NOISE};

/// Group-level parameters: network effects `beta` (G×G, row = follower
/// group), momentum `nu` (G) and fixed effects `zeta` (G×p).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamsFile", try_from = "ParamsFile")]
pub struct GnarParams {
    pub beta: DMatrix<f64>,
    pub nu: DVector<f64>,
    pub zeta: DMatrix<f64>,
}

/// On-disk layout of [`GnarParams`]; matrices are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsFile {
    #[serde(rename = "G")]
    pub g: usize,
    pub p: usize,
    pub beta: Vec<f64>,
    pub nu: Vec<f64>,
    pub zeta: Vec<f64>,
}

impl From<GnarParams> for ParamsFile {
    fn from(p: GnarParams) -> Self {
        let g = p.n_groups();
        let cov = p.p();
        ParamsFile {
            g,
            p: cov,
            beta: p.beta.transpose().iter().copied().collect(),
            nu: p.nu.iter().copied().collect(),
            zeta: p.zeta.transpose().iter().copied().collect(),
        }
    }
}

impl TryFrom<ParamsFile> for GnarParams {
    type Error = Error;

    fn try_from(f: ParamsFile) -> Result<Self> {
        if f.beta.len() != f.g * f.g || f.nu.len() != f.g || f.zeta.len() != f.g * f.p {
            return Err(Error::Dimension(format!(
                "parameter file: G = {}, p = {} but beta/nu/zeta have {}/{}/{} entries",
                f.g,
                f.p,
                f.beta.len(),
                f.nu.len(),
                f.zeta.len()
            )));
        }
        GnarParams::new(
            DMatrix::from_row_slice(f.g, f.g, &f.beta),
            DVector::from_vec(f.nu),
            DMatrix::from_row_slice(f.g, f.p, &f.zeta),
        )
    }
}

impl GnarParams {
    pub fn new(beta: DMatrix<f64>, nu: DVector<f64>, zeta: DMatrix<f64>) -> Result<Self> {
        let g = nu.len();
        if g == 0 || beta.shape() != (g, g) || zeta.nrows() != g {
            return Err(Error::Dimension(format!(
                "beta {:?}, nu {}, zeta {:?} are inconsistent",
                beta.shape(),
                g,
                zeta.shape()
            )));
        }
        if beta.iter().chain(nu.iter()).chain(zeta.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("parameters must be finite".into()));
        }
        Ok(GnarParams { beta, nu, zeta })
    }

    pub fn zeros(g: usize, p: usize) -> Self {
        GnarParams {
            beta: DMatrix::zeros(g, g),
            nu: DVector::zeros(g),
            zeta: DMatrix::zeros(g, p),
        }
    }

    pub fn n_groups(&self) -> usize {
        self.nu.len()
    }

    pub fn p(&self) -> usize {
        self.zeta.ncols()
    }

    /// Length of the per-group coefficient vector `ξ_g = (β_g·, ν_g, ζ_g)`.
    pub fn xi_len(&self) -> usize {
        self.n_groups() + 1 + self.p()
    }

    pub fn xi(&self, g: usize) -> DVector<f64> {
        let gg = self.n_groups();
        let mut out = DVector::zeros(self.xi_len());
        for k in 0..gg {
            out[k] = self.beta[(g, k)];
        }
        out[gg] = self.nu[g];
        for k in 0..self.p() {
            out[gg + 1 + k] = self.zeta[(g, k)];
        }
        out
    }

    pub fn set_xi(&mut self, g: usize, xi: &DVector<f64>) {
        let gg = self.n_groups();
        assert_eq!(xi.len(), self.xi_len());
        for k in 0..gg {
            self.beta[(g, k)] = xi[k];
        }
        self.nu[g] = xi[gg];
        for k in 0..self.p() {
            self.zeta[(g, k)] = xi[gg + 1 + k];
        }
    }

    /// Relabel groups: new group `g` takes the parameters of old group
    /// `perm[g]`, applied to rows and columns of `beta` simultaneously.
    pub fn permuted(&self, perm: &[usize]) -> GnarParams {
        let g = self.n_groups();
        let mut out = GnarParams::zeros(g, self.p());
        for a in 0..g {
            for b in 0..g {
                out.beta[(a, b)] = self.beta[(perm[a], perm[b])];
            }
            out.nu[a] = self.nu[perm[a]];
            for k in 0..self.p() {
                out.zeta[(a, k)] = self.zeta[(perm[a], k)];
            }
        }
        out
    }
}

/// Stationarity check on `max|β| + max|ν| < 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stationarity {
    pub stationary: bool,
    /// `1 − (max|β| + max|ν|)`.
    pub margin: f64,
}

pub fn check_stationarity(params: &GnarParams) -> Stationarity {
    let mb = params.beta.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mn = params.nu.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let margin = 1.0 - (mb + mn);
    Stationarity {
        stationary: margin > 0.0,
        margin,
    }
}

/// Group assignment of every node, labels `0..n_groups` (1-based on disk).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "MembershipFile", try_from = "MembershipFile")]
pub struct Membership {
    labels: Vec<usize>,
    n_groups: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MembershipFile {
    #[serde(rename = "G")]
    pub g: usize,
    /// 1-based labels.
    pub labels: Vec<usize>,
}

impl From<Membership> for MembershipFile {
    fn from(m: Membership) -> Self {
        MembershipFile {
            g: m.n_groups,
            labels: m.one_based(),
        }
    }
}

impl TryFrom<MembershipFile> for Membership {
    type Error = Error;

    fn try_from(f: MembershipFile) -> Result<Self> {
        if f.labels.contains(&0) {
            return Err(Error::Invalid("membership labels are 1-based".into()));
        }
        Membership::new(f.labels.into_iter().map(|g| g - 1).collect(), f.g)
    }
}

impl Membership {
    pub fn new(labels: Vec<usize>, n_groups: usize) -> Result<Self> {
        if n_groups == 0 {
            return Err(Error::Invalid("membership needs at least one group".into()));
        }
        if let Some((i, &g)) = labels.iter().enumerate().find(|(_, &g)| g >= n_groups) {
            return Err(Error::Invalid(format!(
                "node {} has label {} outside 1..={}",
                i + 1,
                g + 1,
                n_groups
            )));
        }
        Ok(Membership { labels, n_groups })
    }

    pub fn constant(n: usize, n_groups: usize) -> Self {
        Membership {
            labels: vec![0; n],
            n_groups,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn set(&mut self, i: usize, g: usize) {
        assert!(g < self.n_groups);
        self.labels[i] = g;
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_groups];
        for &g in &self.labels {
            c[g] += 1;
        }
        c
    }

    pub fn members(&self, g: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == g).collect()
    }

    /// Same partition with groups renumbered in order of first appearance.
    pub fn canonical(&self) -> Membership {
        let mut map = vec![usize::MAX; self.n_groups];
        let mut next = 0;
        let labels = self
            .labels
            .iter()
            .map(|&g| {
                if map[g] == usize::MAX {
                    map[g] = next;
                    next += 1;
                }
                map[g]
            })
            .collect();
        Membership {
            labels,
            n_groups: self.n_groups,
        }
    }

    /// Labels as 1-based integers, the file convention.
    pub fn one_based(&self) -> Vec<usize> {
        self.labels.iter().map(|g| g + 1).collect()
    }
}

/// Observed panel: responses `Y_it` for `t = 0..=T` and fixed covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    n: usize,
    horizon: usize,
    /// Row-major `N × (T+1)`.
    y: Vec<f64>,
    z: DMatrix<f64>,
    covariate_names: Vec<String>,
}

impl Panel {
    /// `y` is `N × (T+1)` (column `t` holds time `t`), `z` is `N × p`.
    pub fn new(y: &DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let names = (1..=z.ncols()).map(|k| format!("z{k}")).collect();
        Self::with_names(y, z, names)
    }

    pub fn with_names(y: &DMatrix<f64>, z: DMatrix<f64>, covariate_names: Vec<String>) -> Result<Self> {
        let n = y.nrows();
        if y.ncols() < 2 {
            return Err(Error::Invalid("panel needs T >= 1 (at least two time points)".into()));
        }
        if z.nrows() != n {
            return Err(Error::Dimension(format!(
                "{} response rows but {} covariate rows",
                n,
                z.nrows()
            )));
        }
        if covariate_names.len() != z.ncols() {
            return Err(Error::Dimension("covariate name count differs from p".into()));
        }
        if y.iter().chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("panel contains missing or non-finite values".into()));
        }
        let mut flat = Vec::with_capacity(n * y.ncols());
        for i in 0..n {
            flat.extend(y.row(i).iter());
        }
        Ok(Panel {
            n,
            horizon: y.ncols() - 1,
            y: flat,
            z,
            covariate_names,
        })
    }

    pub(crate) fn from_flat(n: usize, horizon: usize, y: Vec<f64>, z: DMatrix<f64>) -> Self {
        debug_assert_eq!(y.len(), n * (horizon + 1));
        let covariate_names = (1..=z.ncols()).map(|k| format!("z{k}")).collect();
        Panel {
            n,
            horizon,
            y,
            z,
            covariate_names,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    /// `T`; the panel holds `T + 1` time points.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn p(&self) -> usize {
        self.z.ncols()
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn set_covariate_names(&mut self, names: Vec<String>) -> Result<()> {
        if names.len() != self.p() {
            return Err(Error::Dimension("covariate name count differs from p".into()));
        }
        self.covariate_names = names;
        Ok(())
    }

    /// `Y_i0 .. Y_iT`.
    pub fn series(&self, i: usize) -> &[f64] {
        let w = self.horizon + 1;
        &self.y[i * w..(i + 1) * w]
    }

    /// `Y_i0 .. Y_i(T−1)`.
    pub fn lagged(&self, i: usize) -> &[f64] {
        &self.series(i)[..self.horizon]
    }

    /// `Y_i1 .. Y_iT`.
    pub fn response(&self, i: usize) -> &[f64] {
        &self.series(i)[1..]
    }

    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.y[i * (self.horizon + 1) + t]
    }

    pub fn y_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.horizon + 1, &self.y)
    }

    /// Restrict to the first `horizon + 1` time points.
    pub fn truncated(&self, horizon: usize) -> Result<Panel> {
        if horizon == 0 || horizon > self.horizon {
            return Err(Error::Invalid(format!(
                "cannot truncate T = {} to {}",
                self.horizon, horizon
            )));
        }
        let mut y = Vec::with_capacity(self.n * (horizon + 1));
        for i in 0..self.n {
            y.extend_from_slice(&self.series(i)[..=horizon]);
        }
        let mut p = Panel::from_flat(self.n, horizon, y, self.z.clone());
        p.covariate_names = self.covariate_names.clone();
        Ok(p)
    }
}

/// Innovation law. Gaussian with standard deviation `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    sigma: f64,
}

impl NoiseSpec {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Invalid(format!("noise sigma must be positive, got {sigma}")));
        }
        Ok(NoiseSpec { sigma })
    }

    /// The `σ → 0` limit: deterministic dynamics.
    pub fn zero() -> Self {
        NoiseSpec { sigma: 0.0 }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sigma == 0.0 {
            0.0
        } else {
            let e: f64 = StandardNormal.sample(rng);
            self.sigma * e
        }
    }
}

pub const DEFAULT_BURN_IN: usize = 200;

#[derive(Debug, Clone)]
pub struct SimulateOptions {
    pub horizon: usize,
    pub burn_in: usize,
    /// State before burn-in; zero when `None`.
    pub initial: Option<Vec<f64>>,
    /// Allow parameters that fail the stationarity check.
    pub allow_nonstationary: bool,
}

impl SimulateOptions {
    pub fn new(horizon: usize) -> Self {
        SimulateOptions {
            horizon,
            burn_in: DEFAULT_BURN_IN,
            initial: None,
            allow_nonstationary: false,
        }
    }
}

/// Dense `B` with `b_ij = w_ij β[g_i][g_j]` and `b_ii = ν[g_i]`.
pub fn transition_matrix(params: &GnarParams, mem: &Membership, w: &WeightMatrix) -> DMatrix<f64> {
    let n = w.n_nodes();
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        let gi = mem.get(i);
        let (cols, vals) = w.row(i);
        for (&j, &wij) in cols.iter().zip(vals) {
            b[(i, j)] = wij * params.beta[(gi, mem.get(j))];
        }
        b[(i, i)] = params.nu[gi];
    }
    b
}

/// `μ_z,i = z_iᵀ ζ_{g_i}`.
pub fn fixed_effect_mean(params: &GnarParams, mem: &Membership, z: &DMatrix<f64>) -> Vec<f64> {
    (0..z.nrows())
        .map(|i| {
            let g = mem.get(i);
            (0..z.ncols()).map(|k| z[(i, k)] * params.zeta[(g, k)]).sum()
        })
        .collect()
}

fn check_dims(params: &GnarParams, mem: &Membership, w: &WeightMatrix, z: &DMatrix<f64>) -> Result<()> {
    let n = w.n_nodes();
    if mem.len() != n || z.nrows() != n {
        return Err(Error::Dimension(format!(
            "network has {} nodes, membership {}, covariates {}",
            n,
            mem.len(),
            z.nrows()
        )));
    }
    if mem.n_groups() != params.n_groups() {
        return Err(Error::Dimension(format!(
            "membership has {} groups, parameters {}",
            mem.n_groups(),
            params.n_groups()
        )));
    }
    if z.ncols() != params.p() {
        return Err(Error::Dimension(format!(
            "covariates have p = {}, parameters p = {}",
            z.ncols(),
            params.p()
        )));
    }
    Ok(())
}

/// Forward simulation of `y_t = B y_{t−1} + μ_z + ε_t`. The chain starts at
/// `opts.initial` (zero by default) `burn_in` steps before `t = 0`.
pub fn simulate(
    params: &GnarParams,
    mem: &Membership,
    w: &WeightMatrix,
    z: &DMatrix<f64>,
    noise: NoiseSpec,
    opts: &SimulateOptions,
    seed: u64,
) -> Result<Panel> {
    check_dims(params, mem, w, z)?;
    if opts.horizon == 0 {
        return Err(Error::Invalid("horizon T must be >= 1".into()));
    }
    let st = check_stationarity(params);
    if !st.stationary && !opts.allow_nonstationary {
        return Err(Error::NonStationary(1.0 - st.margin));
    }
    let n = w.n_nodes();
    let mu = fixed_effect_mean(params, mem, z);
    let mut rng = rng::child_rng(seed, STREAM_NOISE, 0);

    let mut cur = match &opts.initial {
        Some(v) if v.len() == n => v.clone(),
        Some(v) => {
            return Err(Error::Dimension(format!(
                "initial state has {} entries, expected {}",
                v.len(),
                n
            )))
        }
        None => vec![0.0; n],
    };
    let mut next = vec![0.0; n];
    let step = |cur: &[f64], next: &mut [f64], rng: &mut rng::Rng| {
        for i in 0..n {
            let gi = mem.get(i);
            let (cols, vals) = w.row(i);
            let net: f64 = cols
                .iter()
                .zip(vals)
                .map(|(&j, &wij)| params.beta[(gi, mem.get(j))] * wij * cur[j])
                .sum();
            next[i] = net + params.nu[gi] * cur[i] + mu[i] + noise.draw(rng);
        }
    };
    for _ in 0..opts.burn_in {
        step(&cur, &mut next, &mut rng);
        std::mem::swap(&mut cur, &mut next);
    }
    let width = opts.horizon + 1;
    let mut y = vec![0.0; n * width];
    for i in 0..n {
        y[i * width] = cur[i];
    }
    for t in 1..width {
        step(&cur, &mut next, &mut rng);
        std::mem::swap(&mut cur, &mut next);
        for i in 0..n {
            y[i * width + t] = cur[i];
        }
    }
    Ok(Panel::from_flat(n, opts.horizon, y, z.clone()))
}
