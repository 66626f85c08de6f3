//! `gnar`: simulate, fit, select, infer and evaluate grouped network
//! autoregressions, and run reproducible Monte-Carlo campaigns.
//!
//! Every command writes its artifacts into `--out-dir`. Node ids and group
//! labels are 1-based in all files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gnar::campaign::{draw_instance, refit, replication_seed, run_campaign, score, Instance};
use gnar::estimate::FitResult;
use gnar::infer::{confidence_intervals, DEFAULT_LEVEL};
use gnar::io::{load_edges, load_json, load_panel, read_series, save_edges, save_json, save_panel, write_series};
use gnar::model::{GnarParams, Membership, Panel};
use gnar::net::{diagnostics, row_normalize, WeightMatrix};
use gnar::scenario::{preprocess_counts, CampaignConfig};
use gnar::select::{default_lambda_for, fit_pipeline, select_g, PipelineOptions};

#[derive(Parser)]
#[command(name = "gnar", version, about = "Grouped network vector autoregression")]
struct Cli {
    /// Base seed; overrides the seed of a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one replication of a configured design and write it to disk.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Which `[[run]]` section, 0-based.
        #[arg(long, default_value_t = 0)]
        run: usize,
        #[arg(long, default_value_t = 0)]
        replication: usize,
    },
    /// Estimate a model with a fixed number of groups.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        /// Number of groups.
        #[arg(short = 'G', long = "groups")]
        groups: usize,
        #[arg(long, default_value_t = 100)]
        restarts: usize,
    },
    /// Choose the number of groups by the information criterion.
    Select {
        #[command(flatten)]
        data: DataArgs,
        /// Candidate group counts, e.g. `1,2,3,4`.
        #[arg(long, value_delimiter = ',', required = true)]
        g_grid: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        restarts: usize,
        /// Penalty weight; the degree-based default when omitted.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Coefficient table with standard errors and confidence intervals.
    Infer {
        /// A `fit.json` written by `fit` or `select`.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long, default_value_t = DEFAULT_LEVEL)]
        level: f64,
        /// Covariate names for the table, e.g. `intercept,age`.
        #[arg(long, value_delimiter = ',')]
        covariate_names: Vec<String>,
    },
    /// Compare a fit with known parameters and memberships.
    Eval {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        membership: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = DEFAULT_LEVEL)]
        level: f64,
    },
    /// Run a simulation campaign.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Replaces every run's group grid.
        #[arg(long, value_delimiter = ',')]
        g_grid: Option<Vec<usize>>,
        #[arg(long)]
        restarts: Option<usize>,
    },
    /// Network diagnostics.
    Diag {
        #[arg(long)]
        edges: PathBuf,
        /// Node count when trailing nodes have no edges.
        #[arg(long)]
        nodes: Option<usize>,
    },
    /// Turn raw counts (long `node,t,y`) into a log-transformed, centered panel.
    Preprocess {
        #[arg(long)]
        counts: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Edge list CSV (`from,to`).
    #[arg(long)]
    edges: PathBuf,
    /// Long panel CSV (`node,t,y`).
    #[arg(long)]
    series: PathBuf,
    /// Covariates CSV (`node,...`).
    #[arg(long)]
    covariates: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<(Panel, WeightMatrix)> {
        let panel = load_panel(&self.series, self.covariates.as_deref())
            .with_context(|| format!("reading panel {}", self.series.display()))?;
        let net = load_edges(&self.edges, Some(panel.n_nodes()))
            .with_context(|| format!("reading edges {}", self.edges.display()))?;
        let w = row_normalize(&net)?;
        Ok((panel, w))
    }
}

fn pipeline_options(seed: u64, restarts: usize) -> PipelineOptions {
    PipelineOptions {
        restarts,
        seed,
        ..PipelineOptions::default()
    }
}

fn write_outputs(dir: &Path, fit: &FitResult, panel: &Panel) -> Result<()> {
    save_json(fit, &dir.join("fit.json"))?;
    save_json(&fit.params, &dir.join("params.json"))?;
    save_json(&fit.membership, &dir.join("membership.json"))?;
    confidence_intervals(fit, panel.covariate_names(), DEFAULT_LEVEL)?.save_csv(&dir.join("coefficients.csv"))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let out = &cli.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let seed = cli.seed.unwrap_or(0);

    match cli.command {
        Command::Simulate {
            config,
            run,
            replication,
        } => {
            let mut cfg = CampaignConfig::load(&config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let Some(run_cfg) = cfg.runs.get(run) else {
                bail!("config has {} runs, asked for run {run}", cfg.runs.len());
            };
            let rep_seed = replication_seed(cfg.seed, run, replication);
            let inst = draw_instance(&cfg, run_cfg, rep_seed)?;
            save_edges(&inst.network, &out.join("edges.csv"))?;
            save_panel(&inst.panel, &out.join("series.csv"), &out.join("covariates.csv"))?;
            save_json(&inst.params, &out.join("true_params.json"))?;
            save_json(&inst.membership, &out.join("true_membership.json"))?;
            fs::write(out.join("config.toml"), cfg.to_toml())?;
        }
        Command::Fit { data, groups, restarts } => {
            let (panel, w) = data.load()?;
            let gf = fit_pipeline(&panel, &w, groups, &pipeline_options(seed, restarts))?;
            let final_fit = refit(&gf, &panel, &w)?;
            save_json(&gf.fit, &out.join("fit_unrefined.json"))?;
            save_json(&gf.refinement, &out.join("refinement.json"))?;
            write_outputs(out, &final_fit, &panel)?;
            println!(
                "G = {groups}: Q = {:.6e}, {} node(s) switched by refinement",
                final_fit.loss,
                gf.refinement.switched.len()
            );
        }
        Command::Select {
            data,
            g_grid,
            restarts,
            lambda,
        } => {
            let (panel, w) = data.load()?;
            let net = load_edges(&data.edges, Some(panel.n_nodes()))?;
            let lambda =
                lambda.unwrap_or_else(|| default_lambda_for(panel.n_nodes(), panel.horizon(), &diagnostics(&net, &w)));
            let sel = select_g(&panel, &w, &g_grid, lambda, &pipeline_options(seed, restarts))?;
            let mut wr = csv::Writer::from_path(out.join("gic.csv"))?;
            wr.write_record(["G", "gic", "loss"])?;
            for k in 0..sel.g_grid.len() {
                wr.write_record([
                    sel.g_grid[k].to_string(),
                    sel.gic_values[k].to_string(),
                    sel.losses[k].to_string(),
                ])?;
            }
            wr.flush()?;
            let final_fit = refit(sel.selected(), &panel, &w)?;
            save_json(&sel.selected().refinement, &out.join("refinement.json"))?;
            write_outputs(out, &final_fit, &panel)?;
            println!("selected G = {} (lambda = {:.6e})", sel.g_hat, sel.lambda);
        }
        Command::Infer {
            fit,
            level,
            covariate_names,
        } => {
            let fit: FitResult = load_json(&fit)?;
            let inf = confidence_intervals(&fit, &covariate_names, level)?;
            inf.save_csv(&out.join("coefficients.csv"))?;
            inf.write_csv(std::io::stdout().lock())?;
        }
        Command::Eval {
            fit,
            params,
            membership,
            data,
            level,
        } => {
            let fit: FitResult = load_json(&fit)?;
            let params: GnarParams = load_json(&params)?;
            let membership: Membership = load_json(&membership)?;
            let (panel, w) = data.load()?;
            let inst = Instance {
                params,
                membership,
                network: load_edges(&data.edges, Some(panel.n_nodes()))?,
                weights: w,
                panel,
            };
            let metrics = score(&fit, &inst, level, false)?;
            save_json(&metrics, &out.join("eval.json"))?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Bench {
            config,
            g_grid,
            restarts,
        } => {
            let mut cfg = CampaignConfig::load(&config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(r) = restarts {
                cfg.restarts = r;
            }
            if let Some(grid) = g_grid {
                cfg.runs.iter_mut().for_each(|r| r.g_grid = grid.clone());
            }
            cfg.validate()?;
            fs::write(out.join("config.toml"), cfg.to_toml())?;
            let report = run_campaign(&cfg)?;
            report.save_metrics_csv(&out.join("metrics.csv"))?;
            report.write_msr_csv(fs::File::create(out.join("msr.csv"))?)?;
            save_json(&report.runs, &out.join("summary.json"))?;
            for s in &report.runs {
                println!(
                    "run {}: {} replications, {} failures",
                    s.run, s.replications, s.failures
                );
            }
            if report.total_failures() > 0 {
                eprintln!("{} replication(s) failed; see summary.json", report.total_failures());
            }
        }
        Command::Diag { edges, nodes } => {
            let net = load_edges(&edges, nodes)?;
            let w = row_normalize(&net)?;
            let d = diagnostics(&net, &w);
            save_json(&d, &out.join("diagnostics.json"))?;
            println!(
                "N = {}, edges = {}, mean degree = {:.3}, max degree = {}, q90 = {:.3}, r_p = {:.4e}, sigma_max(W+W') = {:.4}",
                net.n_nodes(),
                net.n_edges(),
                d.mean_degree,
                d.max_degree,
                d.degree_q90,
                d.r_p,
                d.sigma_max_sym
            );
        }
        Command::Preprocess { counts } => {
            let raw = read_series(fs::File::open(&counts).with_context(|| format!("reading {}", counts.display()))?)?;
            let y = preprocess_counts(&raw)?;
            write_series(&y, fs::File::create(out.join("series.csv"))?)?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
