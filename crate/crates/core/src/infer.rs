//! Plug-in standard errors, Gaussian confidence intervals and p-values for
//! the per-group coefficients `ξ_g = (β_g·, ν_g, ζ_g)`.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimate::FitResult;
use crate::linalg::sym_pinv;

pub const DEFAULT_LEVEL: f64 = 0.95;

/// `RSS / (NT − G(G+p+1))`.
pub fn residual_variance(fit: &FitResult) -> Result<f64> {
    let g = fit.n_groups();
    let free = (g * fit.params.xi_len()) as i64;
    let dof = (fit.n_nodes * fit.horizon) as i64 - free;
    if dof <= 0 {
        return Err(Error::NoDegreesOfFreedom(dof));
    }
    Ok(fit.rss() / dof as f64)
}

/// Covariance of one group's estimate, `σ̂² (X_gᵀX_g)⁻¹` (pseudo-inverse when
/// singular).
#[derive(Debug, Clone)]
pub struct GroupCovariance {
    pub matrix: DMatrix<f64>,
    pub rank: usize,
    /// Per coefficient: whether it is identified by the group's design.
    pub estimable: Vec<bool>,
}

impl GroupCovariance {
    pub fn singular(&self) -> bool {
        self.rank < self.matrix.nrows()
    }
}

pub fn covariance(fit: &FitResult, g: usize, sigma2: f64) -> Result<GroupCovariance> {
    let gram = fit
        .grams
        .get(g)
        .ok_or_else(|| Error::Invalid(format!("fit has no group {}", g + 1)))?;
    if gram.n_rows == 0 {
        return Err(Error::EmptyGroup { group: g + 1 });
    }
    let a = gram.xtx_matrix();
    let (pinv, rank) = sym_pinv(&a);
    let k = a.nrows();
    // e_k lies in the row space of A iff the projector A⁺A fixes it
    let proj = &pinv * &a;
    let estimable = (0..k)
        .map(|c| {
            let mut col = proj.column(c).clone_owned();
            col[c] -= 1.0;
            col.norm() <= 1e-8
        })
        .collect();
    Ok(GroupCovariance {
        matrix: pinv * sigma2,
        rank,
        estimable,
    })
}

/// Two-sided standard normal quantile `z_{(1+level)/2}`.
pub fn critical_value(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Invalid(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    Ok(standard_normal().inverse_cdf(0.5 + level / 2.0))
}

fn standard_normal() -> Normal {
    Normal::standard()
}

/// Two-sided Gaussian p-value of `estimate / se`.
pub fn p_value(estimate: f64, se: f64) -> f64 {
    if se == 0.0 {
        return if estimate == 0.0 { 1.0 } else { 0.0 };
    }
    2.0 * standard_normal().sf((estimate / se).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    /// Absent when the coefficient is not identified.
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupInference {
    /// Number of nodes in the group.
    pub size: usize,
    pub coefficients: Vec<Coefficient>,
    pub singular: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceResult {
    pub level: f64,
    pub critical_value: f64,
    pub sigma2: f64,
    pub groups: Vec<GroupInference>,
}

/// Names of the entries of `ξ_g`: `beta_g_h` for `h = 1..G`, `nu`, then one per
/// covariate (`zeta_k`, or `intercept` for a covariate called that).
pub fn coefficient_names(g: usize, n_groups: usize, covariates: &[String], p: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..n_groups).map(|h| format!("beta_{}_{}", g + 1, h + 1)).collect();
    names.push("nu".into());
    for k in 0..p {
        let name = match covariates.get(k) {
            Some(c) if c.eq_ignore_ascii_case("intercept") => "intercept".to_string(),
            _ => format!("zeta_{}", k + 1),
        };
        names.push(name);
    }
    names
}

/// Intervals `estimate ± z se` for every coefficient of every group. `fit`
/// should be the closed-form solve at the refined memberships.
pub fn confidence_intervals(fit: &FitResult, covariates: &[String], level: f64) -> Result<InferenceResult> {
    let z = critical_value(level)?;
    let sigma2 = residual_variance(fit)?;
    let n_groups = fit.n_groups();
    let counts = fit.membership.counts();
    let mut groups = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let xi = fit.params.xi(g);
        let names = coefficient_names(g, n_groups, covariates, fit.params.p());
        let cov = match covariance(fit, g, sigma2) {
            Ok(c) => Some(c),
            Err(Error::EmptyGroup { .. }) => None,
            Err(e) => return Err(e),
        };
        let coefficients = names
            .into_iter()
            .enumerate()
            .map(|(k, name)| {
                let se = cov
                    .as_ref()
                    .filter(|c| c.estimable[k])
                    .map(|c| c.matrix[(k, k)].max(0.0).sqrt());
                Coefficient {
                    name,
                    estimate: xi[k],
                    se,
                    ci: se.map(|s| (xi[k] - z * s, xi[k] + z * s)),
                    p_value: se.map(|s| p_value(xi[k], s)),
                }
            })
            .collect();
        groups.push(GroupInference {
            size: counts[g],
            coefficients,
            singular: cov.as_ref().is_none_or(|c| c.singular()),
        });
    }
    Ok(InferenceResult {
        level,
        critical_value: z,
        sigma2,
        groups,
    })
}

#[derive(Serialize)]
struct CoefficientRow<'a> {
    group: usize,
    coefficient: &'a str,
    estimate: f64,
    se: Option<f64>,
    ci_lo: Option<f64>,
    ci_hi: Option<f64>,
    p_value: Option<f64>,
}

impl InferenceResult {
    /// Coefficient table, one row per group and coefficient; groups are
    /// 1-based and unidentified entries are left blank.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        for (g, grp) in self.groups.iter().enumerate() {
            for c in &grp.coefficients {
                wr.serialize(CoefficientRow {
                    group: g + 1,
                    coefficient: &c.name,
                    estimate: c.estimate,
                    se: c.se,
                    ci_lo: c.ci.map(|x| x.0),
                    ci_hi: c.ci.map(|x| x.1),
                    p_value: c.p_value,
                })?;
            }
        }
        wr.flush().map_err(|e| Error::io("<coefficients>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::{solve_at, GroupGram};
    use crate::model::{GnarParams, Membership, Panel};
    use crate::net::{gen_sbm, row_normalize};
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn toy_fit(xtx: DMatrix<f64>, rss: f64, n: usize, t: usize) -> FitResult {
        let k = xtx.nrows();
        let params = GnarParams::zeros(1, k - 2);
        FitResult {
            params,
            membership: Membership::constant(n, 1),
            loss: rss / (n * t) as f64,
            loss_trace: vec![],
            grams: vec![GroupGram {
                dim: k,
                n_rows: n * t,
                xtx: xtx.transpose().iter().copied().collect(),
                xty: vec![0.0; k],
                yty: 0.0,
            }],
            converged: true,
            n_iterations: 0,
            init_index: 0,
            n_nodes: n,
            horizon: t,
            seed: None,
        }
    }

    #[test]
    fn critical_value_rounds_to_196() {
        let z = critical_value(0.95).unwrap();
        assert_eq!((z * 100.0).round() / 100.0, 1.96);
        assert!(critical_value(1.0).is_err());
    }

    #[test]
    fn identity_gram_gives_scaled_identity() {
        let fit = toy_fit(DMatrix::identity(3, 3), 8.0, 2, 5);
        // dof = 10 - 3
        let s2 = residual_variance(&fit).unwrap();
        assert_relative_eq!(s2, 8.0 / 7.0);
        let c = covariance(&fit, 0, s2).unwrap();
        assert_relative_eq!(c.matrix, DMatrix::identity(3, 3) * s2, epsilon = 1e-14);
        assert!(!c.singular());
    }

    #[test]
    fn no_degrees_of_freedom_is_an_error() {
        let fit = toy_fit(DMatrix::identity(3, 3), 1.0, 1, 3);
        assert!(matches!(residual_variance(&fit), Err(Error::NoDegreesOfFreedom(0))));
    }

    #[test]
    fn singular_gram_flags_unidentified_coefficients() {
        // columns 2 and 3 collinear, column 1 separate
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 1.0, 2.0, 0.0, 2.0, 4.0, 1.0, 0.0, 0.0, 2.0, 1.0, 2.0]);
        let fit = toy_fit(x.tr_mul(&x), 1.0, 5, 4);
        let c = covariance(&fit, 0, 1.0).unwrap();
        assert!(c.singular());
        assert_eq!(c.estimable, vec![true, false, false]);
        let inf = confidence_intervals(&fit, &[], 0.95).unwrap();
        assert!(inf.groups[0].coefficients[0].ci.is_some());
        assert!(inf.groups[0].coefficients[1].ci.is_none());
    }

    #[test]
    fn zero_residual_gives_degenerate_interval() {
        let fit = toy_fit(DMatrix::identity(3, 3), 0.0, 2, 5);
        let inf = confidence_intervals(&fit, &[], 0.95).unwrap();
        let c = &inf.groups[0].coefficients[0];
        assert_eq!(c.ci, Some((0.0, 0.0)));
        assert_eq!(inf.sigma2, 0.0);
    }

    #[test]
    fn p_values() {
        assert_relative_eq!(p_value(1.959963984540054, 1.0), 0.05, max_relative = 1e-9);
        assert_relative_eq!(p_value(-1.0, 1.0), 0.31731050786291415, max_relative = 1e-9);
        assert_relative_eq!(critical_value(0.95).unwrap(), 1.959963984540054, max_relative = 1e-9);
    }

    #[test]
    fn names_follow_table_layout() {
        let n = coefficient_names(1, 2, &["intercept".into(), "x".into()], 2);
        assert_eq!(n, vec!["beta_2_1", "beta_2_2", "nu", "intercept", "zeta_2"]);
    }

    #[test]
    fn null_model_variance_is_scaled_mean_square() {
        let net = gen_sbm(10, 2, 1).unwrap();
        let w = row_normalize(&net).unwrap();
        let mut r = crate::rng::rng_from(2);
        let y = DMatrix::from_fn(10, 8, |_, _| r.sample::<f64, _>(StandardNormal));
        let panel = Panel::new(&y, DMatrix::zeros(10, 0)).unwrap();
        let mut fit = solve_at(&panel, &w, &Membership::constant(10, 1)).unwrap();
        fit.params = GnarParams::zeros(1, 0);
        fit.loss = crate::estimate::loss(&fit.params, &fit.membership, &panel, &w)
            .unwrap()
            .total;
        let mut ss = 0.0;
        for i in 0..10 {
            for t in 1..8 {
                ss += panel.get(i, t).powi(2);
            }
        }
        assert_relative_eq!(
            residual_variance(&fit).unwrap(),
            ss / (70.0 - 2.0),
            max_relative = 1e-12
        );
    }

    #[test]
    fn csv_layout() {
        let mut fit = toy_fit(DMatrix::identity(3, 3), 8.0, 2, 5);
        fit.params.set_xi(0, &DVector::from_vec(vec![0.5, 0.25, -1.0]));
        let inf = confidence_intervals(&fit, &[], 0.95).unwrap();
        let mut buf = Vec::new();
        inf.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "group,coefficient,estimate,se,ci_lo,ci_hi,p_value"
        );
        assert!(lines.next().unwrap().starts_with("1,beta_1_1,0.5,"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn covariate_rescaling_rescales_se() {
        let net = gen_sbm(30, 2, 3).unwrap();
        let w = row_normalize(&net).unwrap();
        let mut r = crate::rng::rng_from(4);
        let y = DMatrix::from_fn(30, 21, |_, _| r.sample::<f64, _>(StandardNormal));
        let z = DMatrix::from_fn(30, 2, |_, _| r.sample::<f64, _>(StandardNormal));
        let mem = Membership::new((0..30).map(|i| i % 2).collect(), 2).unwrap();
        let a = solve_at(&Panel::new(&y, z.clone()).unwrap(), &w, &mem).unwrap();
        let mut z2 = z;
        z2.column_mut(1).scale_mut(4.0);
        let b = solve_at(&Panel::new(&y, z2).unwrap(), &w, &mem).unwrap();
        let ia = confidence_intervals(&a, &[], 0.95).unwrap();
        let ib = confidence_intervals(&b, &[], 0.95).unwrap();
        for g in 0..2 {
            let ca = &ia.groups[g].coefficients[4];
            let cb = &ib.groups[g].coefficients[4];
            assert_relative_eq!(cb.estimate * 4.0, ca.estimate, max_relative = 1e-8);
            assert_relative_eq!(cb.se.unwrap() * 4.0, ca.se.unwrap(), max_relative = 1e-8);
            assert_relative_eq!(cb.p_value.unwrap(), ca.p_value.unwrap(), max_relative = 1e-8);
        }
    }
}
