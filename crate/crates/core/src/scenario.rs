//! Simulation designs: the benchmark parameter tables, campaign configuration
//! files and preprocessing of raw count panels.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::FitOptions;
use crate::model::{GnarParams, Membership, Panel, DEFAULT_BURN_IN};

/// Benchmark parameters. Scenario 1 uses the base tables; scenario 2 zeroes
/// every momentum `ν_g`; scenario 3 zeroes every fixed effect `ζ_g`.
pub fn scenario_params(scenario: u8, g0: usize) -> Result<GnarParams> {
    let mut params = match g0 {
        2 => GnarParams::new(
            DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.1, 0.3]),
            DVector::from_vec(vec![0.4, 0.6]),
            DMatrix::from_row_slice(2, 2, &[-0.8, 0.8, -0.32, 1.2]),
        )?,
        3 => GnarParams::new(
            DMatrix::from_row_slice(3, 3, &[0.15, 0.2, -0.1, 0.1, 0.3, -0.2, 0.15, 0.1, 0.3]),
            DVector::from_vec(vec![0.2, 0.4, 0.6]),
            DMatrix::from_row_slice(3, 2, &[-1.2, 0.4, -0.8, 0.8, -0.32, 1.2]),
        )?,
        _ => {
            return Err(Error::Unsupported(format!(
                "benchmark tables exist for G0 = 2, 3, not {g0}"
            )))
        }
    };
    match scenario {
        1 => {}
        2 => params.nu.fill(0.0),
        3 => params.zeta.fill(0.0),
        _ => return Err(Error::Unsupported(format!("scenario {scenario}"))),
    }
    Ok(params)
}

/// Default group probabilities: `(0.5, 0.5)` for two groups,
/// `(0.3, 0.3, 0.4)` for three, uniform otherwise.
pub fn default_probabilities(g0: usize) -> Vec<f64> {
    match g0 {
        2 => vec![0.5, 0.5],
        3 => vec![0.3, 0.3, 0.4],
        _ => vec![1.0 / g0 as f64; g0],
    }
}

/// Communities of the stochastic block model: 5 below 150 nodes, 10 below
/// 250, 20 otherwise.
pub fn default_communities(n: usize) -> usize {
    if n < 150 {
        5
    } else if n < 250 {
        10
    } else {
        20
    }
}

/// Independent multinomial labels.
pub fn draw_membership<R: Rng + ?Sized>(n: usize, probs: &[f64], rng: &mut R) -> Result<Membership> {
    let dist = WeightedIndex::new(probs).map_err(|e| Error::Invalid(format!("group probabilities: {e}")))?;
    Membership::new((0..n).map(|_| dist.sample(rng)).collect(), probs.len())
}

/// `N × p` matrix of independent standard normal covariates.
pub fn draw_covariates<R: Rng + ?Sized>(n: usize, p: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    Sbm,
    Powerlaw,
}

impl NetworkKind {
    pub fn name(self) -> &'static str {
        match self {
            NetworkKind::Sbm => "sbm",
            NetworkKind::Powerlaw => "powerlaw",
        }
    }
}

/// One simulation design within a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_scenario")]
    pub scenario: u8,
    #[serde(default = "default_network")]
    pub network: NetworkKind,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "G0")]
    pub g0: usize,
    /// Candidate group counts; defaults to `[G0]`.
    #[serde(default)]
    pub g_grid: Vec<usize>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    /// Group probabilities; defaults to [`default_probabilities`].
    #[serde(default)]
    pub pi: Vec<f64>,
    /// SBM communities; defaults to [`default_communities`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub communities: Option<usize>,
    /// Replaces the benchmark table for this run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<GnarParams>,
    /// Overrides the campaign noise level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

fn default_scenario() -> u8 {
    1
}
fn default_network() -> NetworkKind {
    NetworkKind::Sbm
}
fn default_replications() -> usize {
    100
}
fn default_sigma() -> f64 {
    1.0
}
fn default_restarts() -> usize {
    100
}
fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}
fn default_level() -> f64 {
    0.95
}

impl RunConfig {
    pub fn grid(&self) -> Vec<usize> {
        let mut g = if self.g_grid.is_empty() {
            vec![self.g0]
        } else {
            self.g_grid.clone()
        };
        g.sort_unstable();
        g.dedup();
        g
    }

    pub fn probabilities(&self) -> Vec<f64> {
        if self.pi.is_empty() {
            default_probabilities(self.g0)
        } else {
            self.pi.clone()
        }
    }

    pub fn communities(&self) -> usize {
        self.communities.unwrap_or_else(|| default_communities(self.n))
    }

    pub fn true_params(&self) -> Result<GnarParams> {
        match &self.params {
            Some(p) => Ok(p.clone()),
            None => scenario_params(self.scenario, self.g0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pi = self.probabilities();
        if pi.len() != self.g0 {
            return Err(Error::Invalid(format!(
                "{} group probabilities for G0 = {}",
                pi.len(),
                self.g0
            )));
        }
        if pi.iter().any(|&x| !(x >= 0.0)) || (pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(
                "group probabilities must be nonnegative and sum to 1".into(),
            ));
        }
        let params = self.true_params()?;
        if params.n_groups() != self.g0 {
            return Err(Error::Dimension(format!(
                "parameter table has {} groups, G0 = {}",
                params.n_groups(),
                self.g0
            )));
        }
        if self.n < 2 || self.t < 2 {
            return Err(Error::Invalid("runs need N >= 2 and T >= 2".into()));
        }
        if self.grid().first() == Some(&0) {
            return Err(Error::Invalid("G must be at least 1".into()));
        }
        if self.replications == 0 {
            return Err(Error::Invalid("replications must be positive".into()));
        }
        Ok(())
    }
}

/// A campaign: shared settings plus one or more `[[run]]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(rename = "run")]
    pub runs: Vec<RunConfig>,
}

impl CampaignConfig {
    pub fn single(run: RunConfig) -> Self {
        CampaignConfig {
            seed: 0,
            sigma: default_sigma(),
            restarts: default_restarts(),
            burn_in: default_burn_in(),
            level: default_level(),
            fit: FitOptions::default(),
            runs: vec![run],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: CampaignConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// The configuration with every default filled in, as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::Invalid("campaign has no [[run]] sections".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Invalid("sigma must be positive".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Invalid("level must lie in (0, 1)".into()));
        }
        self.runs.iter().try_for_each(RunConfig::validate)
    }
}

/// `log(1 + X_it)` followed by subtracting each period's cross-sectional mean.
pub fn preprocess_counts(counts: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(bad) = counts.iter().find(|&&x| !(x >= 0.0)) {
        return Err(Error::Invalid(format!("counts must be nonnegative, found {bad}")));
    }
    let mut y = counts.map(f64::ln_1p);
    for mut col in y.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    Ok(y)
}

/// Panel from raw counts `N × (T+1)` and covariates.
pub fn preprocess_real(counts: &DMatrix<f64>, z: DMatrix<f64>, names: Vec<String>) -> Result<Panel> {
    Panel::with_names(&preprocess_counts(counts)?, z, names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;

    #[test]
    fn benchmark_tables() {
        let p = scenario_params(1, 2).unwrap();
        assert_eq!(p.beta, DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.1, 0.3]));
        assert_eq!(p.nu.as_slice(), &[0.4, 0.6]);
        assert_eq!(p.zeta, DMatrix::from_row_slice(2, 2, &[-0.8, 0.8, -0.32, 1.2]));
        let p = scenario_params(2, 3).unwrap();
        assert_eq!(p.nu.as_slice(), &[0.0, 0.0, 0.0]);
        assert_eq!(p.beta.row(0).iter().copied().collect::<Vec<_>>(), vec![0.15, 0.2, -0.1]);
        let p = scenario_params(3, 2).unwrap();
        assert_eq!(p.zeta, DMatrix::zeros(2, 2));
        assert_eq!(p.nu.as_slice(), &[0.4, 0.6]);
        assert!(scenario_params(4, 2).is_err());
        assert!(scenario_params(1, 4).is_err());
    }

    #[test]
    fn community_counts() {
        assert_eq!(default_communities(100), 5);
        assert_eq!(default_communities(200), 10);
        assert_eq!(default_communities(300), 20);
    }

    #[test]
    fn membership_draw_frequencies() {
        let mut r = rng::rng_from(1);
        let m = draw_membership(20_000, &[0.3, 0.3, 0.4], &mut r).unwrap();
        let c = m.counts();
        assert_relative_eq!(c[2] as f64 / 20_000.0, 0.4, epsilon = 0.015);
    }

    #[test]
    fn config_defaults_and_round_trip() {
        let text = "seed = 7\n[[run]]\nN = 100\nT = 300\nG0 = 2\n";
        let cfg = CampaignConfig::from_toml(text).unwrap();
        assert_eq!(cfg.sigma, 1.0);
        assert_eq!(cfg.restarts, 100);
        let run = &cfg.runs[0];
        assert_eq!(run.scenario, 1);
        assert_eq!(run.network, NetworkKind::Sbm);
        assert_eq!(run.grid(), vec![2]);
        assert_eq!(run.replications, 100);
        let back = CampaignConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_rejects_bad_probabilities() {
        let text = "[[run]]\nN = 100\nT = 30\nG0 = 2\npi = [0.5, 0.6]\n";
        assert!(CampaignConfig::from_toml(text).is_err());
        let text = "[[run]]\nN = 100\nT = 30\nG0 = 2\npi = [0.3, 0.3, 0.4]\n";
        assert!(CampaignConfig::from_toml(text).is_err());
        assert!(CampaignConfig::from_toml("seed = 1\n").is_err());
    }

    #[test]
    fn preprocessing() {
        let zero = DMatrix::zeros(3, 4);
        assert_eq!(preprocess_counts(&zero).unwrap(), zero);
        let x = DMatrix::from_column_slice(2, 1, &[0.0, std::f64::consts::E - 1.0]);
        let y = preprocess_counts(&x).unwrap();
        assert_relative_eq!(y[(0, 0)], -0.5, epsilon = 1e-15);
        assert_relative_eq!(y[(1, 0)], 0.5, epsilon = 1e-15);
        assert!(preprocess_counts(&DMatrix::from_element(1, 1, -1.0)).is_err());
        let mut r = rng::rng_from(3);
        let counts = DMatrix::from_fn(7, 5, |_, _| r.random_range(0..1000) as f64);
        let y = preprocess_counts(&counts).unwrap();
        for c in y.column_iter() {
            assert!(c.sum().abs() < 1e-12);
        }
    }
}
