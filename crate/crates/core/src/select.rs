//! Choosing the number of groups with a penalized log-loss criterion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{fit, FitOptions, FitResult};
use crate::init::init_pool;
use crate::model::Panel;
use crate::net::{NetDiagnostics, WeightMatrix};
use crate::refine::{refine, RefineOptions, RefinementReport};
use crate::rng;

/// `N^{1/10} T^{-1/2} / (2 min(10, n_0.9))`, with `n_0.9` the 90% quantile of
/// out-degrees.
pub fn default_lambda(n: usize, t: usize, degree_q90: f64) -> f64 {
    (n as f64).powf(0.1) / (t as f64).sqrt() / (2.0 * degree_q90.min(10.0))
}

pub fn default_lambda_for(n: usize, t: usize, diag: &NetDiagnostics) -> f64 {
    default_lambda(n, t, diag.degree_q90)
}

/// `log Q + λ G`.
pub fn gic(fit: &FitResult, lambda: f64) -> Result<f64> {
    if fit.loss <= 0.0 {
        return Err(Error::ZeroLoss);
    }
    Ok(fit.loss.ln() + lambda * fit.n_groups() as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub fit: FitOptions,
    pub refine: RefineOptions,
    /// Seeds for the k-means initialization.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            fit: FitOptions::default(),
            refine: RefineOptions::default(),
            restarts: 100,
            seed: 0,
        }
    }
}

/// Fit for one `G` plus its refinement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupFit {
    pub fit: FitResult,
    pub refinement: RefinementReport,
}

/// Initialize, fit and refine for a single `G`.
pub fn fit_pipeline(panel: &Panel, w: &WeightMatrix, g: usize, opts: &PipelineOptions) -> Result<GroupFit> {
    let seed = rng::derive_seed(opts.seed, rng::STREAM_INIT, g as u64);
    let pool = init_pool(panel, w, g, opts.restarts, seed)?;
    let mut fitted = fit(panel, w, g, &pool, &opts.fit)?;
    fitted.seed = Some(opts.seed);
    let refine_opts = RefineOptions {
        seed: rng::derive_seed(opts.seed, rng::STREAM_REFINE, g as u64),
        ..opts.refine
    };
    let refinement = refine(&fitted, panel, w, None, &refine_opts)?;
    Ok(GroupFit {
        fit: fitted,
        refinement,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Candidate group counts, ascending.
    pub g_grid: Vec<usize>,
    pub gic_values: Vec<f64>,
    pub losses: Vec<f64>,
    pub fits: Vec<GroupFit>,
    pub g_hat: usize,
    pub lambda: f64,
}

impl SelectionResult {
    pub fn selected(&self) -> &GroupFit {
        let pos = self
            .g_grid
            .iter()
            .position(|&g| g == self.g_hat)
            .expect("g_hat is in the grid");
        &self.fits[pos]
    }
}

/// Position of the smallest value; ties go to the earliest.
pub fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v < values[b]) {
            best = Some(k);
        }
    }
    best
}

/// Run the full pipeline for every `G` in the grid and pick the GIC minimizer
/// (ties to the smaller `G`). The criterion uses the unrefined fit's loss.
pub fn select_g(
    panel: &Panel,
    w: &WeightMatrix,
    grid: &[usize],
    lambda: f64,
    opts: &PipelineOptions,
) -> Result<SelectionResult> {
    let mut g_grid = grid.to_vec();
    g_grid.sort_unstable();
    g_grid.dedup();
    if g_grid.is_empty() {
        return Err(Error::Invalid("group grid is empty".into()));
    }
    if g_grid[0] == 0 {
        return Err(Error::Invalid("G must be at least 1".into()));
    }
    let fits = g_grid
        .par_iter()
        .map(|&g| fit_pipeline(panel, w, g, opts))
        .collect::<Result<Vec<_>>>()?;
    let gic_values = fits.iter().map(|f| gic(&f.fit, lambda)).collect::<Result<Vec<_>>>()?;
    let losses = fits.iter().map(|f| f.fit.loss).collect();
    let g_hat = g_grid[argmin_first(&gic_values).expect("grid is nonempty")];
    Ok(SelectionResult {
        g_grid,
        gic_values,
        losses,
        fits,
        g_hat,
        lambda,
    })
}
