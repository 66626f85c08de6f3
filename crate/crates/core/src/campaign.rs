//! Monte-Carlo harness. Each replication draws a network, memberships,
//! covariates and a panel, then runs the estimation pipeline for every `G` in
//! the grid alongside the oracle fit at the true labels.
//!
//! Replications run in parallel but every random stream is derived from
//! `(seed, run, replication)`, so outputs do not depend on the thread count.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{solve_at, FitResult};
use crate::eval::{
    coverage_hits, membership_error, msr, rmse_all, rmse_perm, CoverageHits, CoverageTally, FamilyCoverage,
};
use crate::infer::confidence_intervals;
use crate::model::{simulate, GnarParams, Membership, NoiseSpec, Panel, SimulateOptions};
use crate::net::{gen_powerlaw, gen_sbm, quantile, row_normalize, Network, WeightMatrix};
use crate::refine::RefineOptions;
use crate::rng;
use crate::scenario::{draw_covariates, draw_membership, CampaignConfig, NetworkKind, RunConfig};
use crate::select::{argmin_first, default_lambda, fit_pipeline, gic, GroupFit, PipelineOptions};

/// Metrics of one fit against the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    pub rho_hat: f64,
    pub rmse_beta_all: f64,
    pub rmse_nu_all: f64,
    pub rmse_zeta_all: f64,
    /// Permutation-matched errors and interval hits; only when `G = G0`.
    pub matched: Option<MatchedMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedMetrics {
    pub rmse_beta: f64,
    pub rmse_nu: f64,
    pub rmse_zeta: f64,
    pub hits: CoverageHits,
}

/// A simulated data set with its ground truth.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: GnarParams,
    pub membership: Membership,
    pub network: Network,
    pub weights: WeightMatrix,
    pub panel: Panel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Replication {
    pub index: usize,
    /// Per grid value, in grid order.
    pub fits: Vec<(usize, FitMetrics)>,
    pub oracle: FitMetrics,
    pub gic: Vec<f64>,
    pub g_hat: usize,
}

pub fn replication_seed(base: u64, run: usize, b: usize) -> u64 {
    rng::derive_seed(
        rng::derive_seed(base, rng::STREAM_REPLICATION, run as u64),
        rng::STREAM_REPLICATION,
        b as u64,
    )
}

/// Draw the data of replication `b` of `run`.
pub fn draw_instance(cfg: &CampaignConfig, run: &RunConfig, seed: u64) -> Result<Instance> {
    let params = run.true_params()?;
    let network = match run.network {
        NetworkKind::Sbm => gen_sbm(run.n, run.communities(), rng::derive_seed(seed, rng::STREAM_NETWORK, 0))?,
        NetworkKind::Powerlaw => gen_powerlaw(run.n, rng::derive_seed(seed, rng::STREAM_NETWORK, 0))?,
    };
    let weights = row_normalize(&network)?;
    let membership = draw_membership(
        run.n,
        &run.probabilities(),
        &mut rng::child_rng(seed, rng::STREAM_MEMBERSHIP, 0),
    )?;
    let z = draw_covariates(run.n, params.p(), &mut rng::child_rng(seed, rng::STREAM_COVARIATES, 0));
    let noise = NoiseSpec::new(run.sigma.unwrap_or(cfg.sigma))?;
    let mut opts = SimulateOptions::new(run.t);
    opts.burn_in = cfg.burn_in;
    let panel = simulate(
        &params,
        &membership,
        &weights,
        &z,
        noise,
        &opts,
        rng::derive_seed(seed, rng::STREAM_NOISE, 0),
    )?;
    Ok(Instance {
        params,
        membership,
        network,
        weights,
        panel,
    })
}

/// Score `fit` (a closed-form solve at its final labels) against the truth.
pub fn score(fit: &FitResult, inst: &Instance, level: f64, oracle: bool) -> Result<FitMetrics> {
    let all = rmse_all(
        &fit.params,
        &fit.membership,
        &inst.params,
        &inst.membership,
        &inst.weights,
    )?;
    let matched = if fit.n_groups() == inst.params.n_groups() {
        let (perm, errs) = if oracle {
            let id: Vec<usize> = (0..fit.n_groups()).collect();
            let aligned = fit.params.permuted(&id);
            (
                id,
                (
                    (&aligned.beta - &inst.params.beta).norm(),
                    (&aligned.nu - &inst.params.nu).norm(),
                    (&aligned.zeta - &inst.params.zeta).norm(),
                ),
            )
        } else {
            let m = rmse_perm(&fit.params, &inst.params)?;
            (m.perm, (m.beta, m.nu, m.zeta))
        };
        let inf = confidence_intervals(fit, inst.panel.covariate_names(), level)?;
        Some(MatchedMetrics {
            rmse_beta: errs.0,
            rmse_nu: errs.1,
            rmse_zeta: errs.2,
            hits: coverage_hits(&inf, &inst.params, &perm)?,
        })
    } else {
        None
    };
    Ok(FitMetrics {
        rho_hat: membership_error(&fit.membership, &inst.membership)?,
        rmse_beta_all: all.beta,
        rmse_nu_all: all.nu,
        rmse_zeta_all: all.zeta,
        matched,
    })
}

/// Closed-form refit at the refined labels of a pipeline fit.
pub fn refit(group_fit: &GroupFit, panel: &Panel, w: &WeightMatrix) -> Result<FitResult> {
    let mut r = solve_at(panel, w, &group_fit.refinement.labels_after)?;
    r.seed = group_fit.fit.seed;
    Ok(r)
}

pub fn run_replication(cfg: &CampaignConfig, run_index: usize, b: usize) -> Result<Replication> {
    let run = cfg
        .runs
        .get(run_index)
        .ok_or_else(|| Error::Invalid(format!("campaign has no run {run_index}")))?;
    let seed = replication_seed(cfg.seed, run_index, b);
    let inst = draw_instance(cfg, run, seed)?;
    let grid = run.grid();
    let opts = PipelineOptions {
        fit: cfg.fit,
        refine: RefineOptions::default(),
        restarts: cfg.restarts,
        seed: rng::derive_seed(seed, rng::STREAM_INIT, 0),
    };
    let degrees: Vec<f64> = inst.network.out_degree().iter().map(|&d| d as f64).collect();
    let lambda = default_lambda(run.n, run.t, quantile(&degrees, 0.9));

    let mut fits = Vec::with_capacity(grid.len());
    let mut gics = Vec::with_capacity(grid.len());
    for &g in &grid {
        let gf = fit_pipeline(&inst.panel, &inst.weights, g, &opts)?;
        gics.push(gic(&gf.fit, lambda)?);
        let final_fit = refit(&gf, &inst.panel, &inst.weights)?;
        fits.push((g, score(&final_fit, &inst, cfg.level, false)?));
    }
    let oracle_fit = solve_at(&inst.panel, &inst.weights, &inst.membership)?;
    let oracle = score(&oracle_fit, &inst, cfg.level, true)?;
    let g_hat = grid[argmin_first(&gics).expect("grid is nonempty")];
    Ok(Replication {
        index: b,
        fits,
        oracle,
        gic: gics,
        g_hat,
    })
}

/// One line of the metrics table. Empty cells are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: u8,
    pub network: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    /// A group count, `oracle`, or `ghat`.
    #[serde(rename = "G")]
    pub g: String,
    /// Replication index or `mean`.
    pub b: String,
    pub rho_hat: Option<f64>,
    pub rmse_beta: Option<f64>,
    pub rmse_nu: Option<f64>,
    pub rmse_zeta: Option<f64>,
    pub rmse_beta_all: Option<f64>,
    pub rmse_nu_all: Option<f64>,
    pub rmse_zeta_all: Option<f64>,
    pub ae_cp_beta: Option<f64>,
    pub ae_cp_nu: Option<f64>,
    pub ae_cp_zeta: Option<f64>,
    pub g_hat: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub config: RunConfig,
    pub replications: usize,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    /// `(G, MSR(G))` over the grid.
    pub msr: Vec<(usize, f64)>,
    /// Pooled interval coverage at `G = G0`, estimated and oracle.
    pub coverage: Option<FamilyCoverage>,
    pub coverage_oracle: Option<FamilyCoverage>,
    pub ae_cp: Option<FamilyCoverage>,
    pub ae_cp_oracle: Option<FamilyCoverage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignReport {
    pub rows: Vec<MetricsRow>,
    pub runs: Vec<RunSummary>,
    pub replications: Vec<Vec<Replication>>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn row_for(run: &RunConfig, g: String, b: String, m: &FitMetrics, g_hat: Option<usize>) -> MetricsRow {
    MetricsRow {
        scenario: run.scenario,
        network: run.network.name().into(),
        n: run.n,
        t: run.t,
        g,
        b,
        rho_hat: Some(m.rho_hat),
        rmse_beta: m.matched.as_ref().map(|x| x.rmse_beta),
        rmse_nu: m.matched.as_ref().map(|x| x.rmse_nu),
        rmse_zeta: m.matched.as_ref().map(|x| x.rmse_zeta),
        rmse_beta_all: Some(m.rmse_beta_all),
        rmse_nu_all: Some(m.rmse_nu_all),
        rmse_zeta_all: Some(m.rmse_zeta_all),
        ae_cp_beta: None,
        ae_cp_nu: None,
        ae_cp_zeta: None,
        g_hat,
    }
}

fn mean_row(run: &RunConfig, g: String, metrics: &[&FitMetrics]) -> MetricsRow {
    let f = |get: fn(&FitMetrics) -> Option<f64>| mean(metrics.iter().filter_map(|m| get(m)));
    let mut tally = CoverageTally::default();
    for m in metrics {
        if let Some(x) = &m.matched {
            tally.add(&x.hits);
        }
    }
    let ae = (tally.replications > 0).then(|| tally.ae_cp());
    MetricsRow {
        scenario: run.scenario,
        network: run.network.name().into(),
        n: run.n,
        t: run.t,
        g,
        b: "mean".into(),
        rho_hat: f(|m| Some(m.rho_hat)),
        rmse_beta: f(|m| m.matched.as_ref().map(|x| x.rmse_beta)),
        rmse_nu: f(|m| m.matched.as_ref().map(|x| x.rmse_nu)),
        rmse_zeta: f(|m| m.matched.as_ref().map(|x| x.rmse_zeta)),
        rmse_beta_all: f(|m| Some(m.rmse_beta_all)),
        rmse_nu_all: f(|m| Some(m.rmse_nu_all)),
        rmse_zeta_all: f(|m| Some(m.rmse_zeta_all)),
        ae_cp_beta: ae.map(|a| a.beta),
        ae_cp_nu: ae.map(|a| a.nu),
        ae_cp_zeta: ae.map(|a| a.zeta),
        g_hat: None,
    }
}

fn tally_of<'a>(metrics: impl Iterator<Item = &'a FitMetrics>) -> Option<CoverageTally> {
    let mut tally = CoverageTally::default();
    for m in metrics {
        if let Some(x) = &m.matched {
            tally.add(&x.hits);
        }
    }
    (tally.replications > 0).then_some(tally)
}

/// Run every replication of every run. Per-replication failures are counted
/// and skipped.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut all_reps = Vec::new();
    for (ri, run) in cfg.runs.iter().enumerate() {
        let results: Vec<Result<Replication>> = (0..run.replications)
            .into_par_iter()
            .map(|b| run_replication(cfg, ri, b))
            .collect();
        let mut reps = Vec::new();
        let mut failure_messages = Vec::new();
        for (b, r) in results.into_iter().enumerate() {
            match r {
                Ok(rep) => reps.push(rep),
                Err(e) => failure_messages.push(format!("replication {b}: {e}")),
            }
        }
        let grid = run.grid();
        let selecting = grid.len() > 1;
        for rep in &reps {
            let g_hat = selecting.then_some(rep.g_hat);
            for (g, m) in &rep.fits {
                rows.push(row_for(run, g.to_string(), rep.index.to_string(), m, g_hat));
            }
            rows.push(row_for(run, "oracle".into(), rep.index.to_string(), &rep.oracle, None));
            if selecting {
                let sel = rep
                    .fits
                    .iter()
                    .find(|(g, _)| *g == rep.g_hat)
                    .map(|(_, m)| m)
                    .expect("g_hat in grid");
                rows.push(row_for(run, "ghat".into(), rep.index.to_string(), sel, g_hat));
            }
        }
        if !reps.is_empty() {
            for (k, &g) in grid.iter().enumerate() {
                let ms: Vec<&FitMetrics> = reps.iter().map(|r| &r.fits[k].1).collect();
                rows.push(mean_row(run, g.to_string(), &ms));
            }
            let ms: Vec<&FitMetrics> = reps.iter().map(|r| &r.oracle).collect();
            rows.push(mean_row(run, "oracle".into(), &ms));
            if selecting {
                let ms: Vec<&FitMetrics> = reps
                    .iter()
                    .map(|r| &r.fits.iter().find(|(g, _)| *g == r.g_hat).expect("g_hat in grid").1)
                    .collect();
                rows.push(mean_row(run, "ghat".into(), &ms));
            }
        }
        let selected: Vec<usize> = reps.iter().map(|r| r.g_hat).collect();
        let est_tally = grid
            .iter()
            .position(|&g| g == run.g0)
            .and_then(|k| tally_of(reps.iter().map(|r| &r.fits[k].1)));
        let oracle_tally = tally_of(reps.iter().map(|r| &r.oracle));
        summaries.push(RunSummary {
            run: ri,
            config: run.clone(),
            replications: reps.len(),
            failures: failure_messages.len(),
            failure_messages,
            msr: grid.iter().map(|&g| (g, msr(&selected, g))).collect(),
            coverage: est_tally.as_ref().map(CoverageTally::coverage),
            coverage_oracle: oracle_tally.as_ref().map(CoverageTally::coverage),
            ae_cp: est_tally.as_ref().map(CoverageTally::ae_cp),
            ae_cp_oracle: oracle_tally.as_ref().map(CoverageTally::ae_cp),
        });
        all_reps.push(reps);
    }
    Ok(CampaignReport {
        rows,
        runs: summaries,
        replications: all_reps,
    })
}

impl CampaignReport {
    pub fn write_metrics_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush().map_err(|e| Error::io("<metrics>", e))?;
        Ok(())
    }

    pub fn save_metrics_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_metrics_csv(std::io::BufWriter::new(f))
    }

    /// Model-selection rates, one row per run and candidate `G`.
    pub fn write_msr_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        wr.write_record(["run", "scenario", "network", "N", "T", "G", "msr"])?;
        for s in &self.runs {
            for (g, rate) in &s.msr {
                wr.write_record([
                    s.run.to_string(),
                    s.config.scenario.to_string(),
                    s.config.network.name().to_string(),
                    s.config.n.to_string(),
                    s.config.t.to_string(),
                    g.to_string(),
                    rate.to_string(),
                ])?;
            }
        }
        wr.flush().map_err(|e| Error::io("<msr>", e))?;
        Ok(())
    }

    pub fn total_failures(&self) -> usize {
        self.runs.iter().map(|s| s.failures).sum()
    }
}
