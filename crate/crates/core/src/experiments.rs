//! Replicated M/M/1 benchmark: maximum absolute errors of the fitted values
//! and subgradients for four estimator configurations.
//!
//! * `A1`: penalized fit with `lambda = n^{-0.8}`
//! * `A2`: penalized fit with `lambda` picked by 5-fold cross-validation
//! * `B`: gradient-bounded fit with `u = J_inf` of the `C` fit
//! * `C`: error-bounded fit with `s` from the partition variance estimate

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{fit_a, fit_b, fit_c, Dataset, FitResult};
use crate::hyperparams::{
    cross_validate_lambda, default_partition_cells, estimate_s_partition, lambda_schedule, CvOutcome,
    PartitionSpec, DEFAULT_LAMBDA_CANDIDATES,
};
use crate::max_affine::{sup_norm, MaxAffineModel};
use crate::qp::SolverTolerances;
use crate::queue_sim::{derive_seed, generate_dataset, grad_true_f0, true_f0};

/// Normal quantile used for the confidence intervals.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Configuration {
    A1,
    A2,
    B,
    C,
}

impl Configuration {
    pub const ALL: [Configuration; 4] = [Configuration::A1, Configuration::A2, Configuration::B, Configuration::C];
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Configuration::A1 => "A1",
            Configuration::A2 => "A2",
            Configuration::B => "B",
            Configuration::C => "C",
        })
    }
}

/// `max_i |f(X_i) - f0(X_i)|`.
pub fn mae_value<F>(model: &MaxAffineModel, points: &[Vec<f64>], f0: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if points.is_empty() {
        return Err(Error::invalid("MAE needs at least one point"));
    }
    points.iter().try_fold(0.0, |worst: f64, x| Ok(worst.max((model.evaluate(x)? - f0(x)?).abs())))
}

/// `max_i |g(X_i) - grad f0(X_i)|_inf` with `g` the model's reported subgradient.
pub fn mae_subgradient<F>(model: &MaxAffineModel, points: &[Vec<f64>], grad_f0: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if points.is_empty() {
        return Err(Error::invalid("MAE needs at least one point"));
    }
    points.iter().try_fold(0.0, |worst: f64, x| {
        let g = model.subgradient(x)?;
        let truth = grad_f0(x)?;
        if truth.len() != g.len() {
            return Err(Error::Dimension { expected: g.len(), got: truth.len() });
        }
        let diff: Vec<f64> = g.iter().zip(&truth).map(|(a, b)| a - b).collect();
        Ok(worst.max(sup_norm(&diff)))
    })
}

/// Mean and 95% half-width `1.96 sd / sqrt(k)` (sample standard deviation).
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::invalid("confidence interval needs at least two values"));
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    Ok((mean, Z95 * var.sqrt() / k.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quartiles by linear interpolation, outliers beyond 1.5 IQR from the box,
/// whiskers at the most extreme remaining values.
pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(Error::invalid("box statistics need at least one value"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("box statistics need finite values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&sorted, 0.25), quantile(&sorted, 0.5), quantile(&sorted, 0.75));
    let fence = 1.5 * (q3 - q1);
    let (lo, hi) = (q1 - fence, q3 + fence);
    let inside: Vec<f64> = sorted.iter().copied().filter(|v| (lo..=hi).contains(v)).collect();
    Ok(BoxStats {
        q1,
        median,
        q3,
        whisker_low: inside.first().copied().unwrap_or(median),
        whisker_high: inside.last().copied().unwrap_or(median),
        outliers: sorted.into_iter().filter(|v| !(lo..=hi).contains(v)).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct ReplicationPlan {
    pub n: usize,
    pub reps: usize,
    pub customers: usize,
    pub base_seed: u64,
    pub configurations: Vec<Configuration>,
    pub cv_candidates: Vec<f64>,
    pub folds: usize,
    pub tolerances: SolverTolerances,
}

impl ReplicationPlan {
    pub fn new(n: usize, reps: usize, customers: usize, base_seed: u64) -> Self {
        ReplicationPlan {
            n,
            reps,
            customers,
            base_seed,
            configurations: Configuration::ALL.to_vec(),
            cv_candidates: DEFAULT_LAMBDA_CANDIDATES.to_vec(),
            folds: 5,
            tolerances: SolverTolerances::default(),
        }
    }

    /// Dataset seed of replication `index`.
    pub fn replication_seed(&self, index: usize) -> u64 {
        derive_seed(derive_seed(self.base_seed, self.n as u64), index as u64)
    }

    fn validate(&self) -> Result<()> {
        if self.reps < 2 {
            return Err(Error::invalid("need at least two replications"));
        }
        if self.configurations.is_empty() {
            return Err(Error::invalid("no configurations requested"));
        }
        if self.configurations.contains(&Configuration::A2) && self.cv_candidates.is_empty() {
            return Err(Error::invalid("configuration A2 needs penalty candidates"));
        }
        Ok(())
    }
}

/// Everything fitted in one replication, handed to inspection callbacks.
pub struct ReplicationFits<'a> {
    pub index: usize,
    pub data: &'a Dataset,
    pub s: f64,
    pub fits: &'a BTreeMap<Configuration, FitResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mae {
    pub value: f64,
    pub subgradient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub index: usize,
    pub seed: u64,
    pub s: Option<f64>,
    pub u: Option<f64>,
    pub lambda_a1: Option<f64>,
    pub lambda_a2: Option<f64>,
    pub cv_curve: Option<Vec<f64>>,
    pub mae: BTreeMap<Configuration, Mae>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub values: Vec<f64>,
    pub mean: Option<f64>,
    pub half_width: Option<f64>,
    pub box_stats: Option<BoxStats>,
}

impl MetricSummary {
    fn from_values(values: Vec<f64>) -> Self {
        let ci = confidence_interval(&values).ok();
        MetricSummary {
            mean: ci.map(|c| c.0),
            half_width: ci.map(|c| c.1),
            box_stats: box_stats(&values).ok(),
            values,
        }
    }

    /// `mean±half_width` with the given number of decimals, empty when undefined.
    pub fn cell(&self, decimals: usize) -> String {
        match (self.mean, self.half_width) {
            (Some(m), Some(h)) => format!("{m:.decimals$}±{h:.decimals$}"),
            _ => String::new(),
        }
    }

    pub fn has_outliers(&self) -> bool {
        self.box_stats.as_ref().is_some_and(|b| !b.outliers.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub configuration: Configuration,
    pub value: MetricSummary,
    pub subgradient: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub n: usize,
    pub reps: usize,
    pub customers: usize,
    pub base_seed: u64,
    pub partition_cells: usize,
    pub cv_candidates: Vec<f64>,
    pub folds: usize,
    pub failed_replications: usize,
    /// Replications in which cross-validation chose `lambda = 0`.
    pub lambda_zero_selections: usize,
    pub summaries: Vec<ConfigSummary>,
    pub replications: Vec<ReplicationRecord>,
}

impl ExperimentReport {
    pub fn summary(&self, configuration: Configuration) -> Option<&ConfigSummary> {
        self.summaries.iter().find(|s| s.configuration == configuration)
    }
}

/// Runs the replications of one sample size.
pub fn run_replications(plan: &ReplicationPlan) -> Result<ExperimentReport> {
    run_replications_with(plan, |_| {})
}

/// Like [`run_replications`], calling `inspect` on the fits of every
/// successful replication (possibly from several threads).
pub fn run_replications_with<F>(plan: &ReplicationPlan, inspect: F) -> Result<ExperimentReport>
where
    F: Fn(&ReplicationFits<'_>) + Sync,
{
    plan.validate()?;
    let cells = default_partition_cells(plan.n);
    let records: Vec<ReplicationRecord> = (0..plan.reps)
        .into_par_iter()
        .map(|index| {
            let seed = plan.replication_seed(index);
            let mut record = ReplicationRecord {
                index,
                seed,
                s: None,
                u: None,
                lambda_a1: None,
                lambda_a2: None,
                cv_curve: None,
                mae: BTreeMap::new(),
                failure: None,
            };
            if let Err(e) = run_one(plan, cells, &mut record, &inspect) {
                log::warn!("n = {}, replication {index} failed: {e}", plan.n);
                record.failure = Some(e.to_string());
                record.mae.clear();
            }
            record
        })
        .collect();

    let ok: Vec<&ReplicationRecord> = records.iter().filter(|r| r.failure.is_none()).collect();
    let summaries = plan
        .configurations
        .iter()
        .map(|&configuration| {
            let maes: Vec<&Mae> = ok.iter().map(|r| &r.mae[&configuration]).collect();
            ConfigSummary {
                configuration,
                value: MetricSummary::from_values(maes.iter().map(|m| m.value).collect()),
                subgradient: MetricSummary::from_values(maes.iter().map(|m| m.subgradient).collect()),
            }
        })
        .collect();
    Ok(ExperimentReport {
        n: plan.n,
        reps: plan.reps,
        customers: plan.customers,
        base_seed: plan.base_seed,
        partition_cells: cells,
        cv_candidates: plan.cv_candidates.clone(),
        folds: plan.folds,
        failed_replications: records.len() - ok.len(),
        lambda_zero_selections: ok.iter().filter(|r| r.lambda_a2 == Some(0.0)).count(),
        summaries,
        replications: records,
    })
}

fn run_one<F>(plan: &ReplicationPlan, cells: usize, record: &mut ReplicationRecord, inspect: &F) -> Result<()>
where
    F: Fn(&ReplicationFits<'_>),
{
    let tol = &plan.tolerances;
    let (data, _) = generate_dataset(plan.n, plan.customers, record.seed)?;
    let s = estimate_s_partition(&data, &PartitionSpec::uniform(cells)?)?;
    record.s = Some(s);

    let wants = |c: Configuration| plan.configurations.contains(&c);
    let mut fits = BTreeMap::new();
    if wants(Configuration::B) || wants(Configuration::C) {
        let c_fit = fit_c(&data, s, tol)?;
        if wants(Configuration::B) {
            let u = c_fit.model.j_inf();
            record.u = Some(u);
            fits.insert(Configuration::B, fit_b(&data, u, tol)?);
        }
        if wants(Configuration::C) {
            fits.insert(Configuration::C, c_fit);
        }
    }
    if wants(Configuration::A1) {
        let lambda = lambda_schedule(plan.n)?;
        record.lambda_a1 = Some(lambda);
        fits.insert(Configuration::A1, fit_a(&data, lambda, tol)?);
    }
    if wants(Configuration::A2) {
        let CvOutcome { lambda, curve, .. } =
            cross_validate_lambda(&data, &plan.cv_candidates, plan.folds, derive_seed(record.seed, 1), tol)?;
        record.lambda_a2 = Some(lambda);
        record.cv_curve = Some(curve);
        fits.insert(Configuration::A2, fit_a(&data, lambda, tol)?);
    }

    let f0 = |x: &[f64]| true_f0(x[0]);
    let grad = |x: &[f64]| Ok(vec![grad_true_f0(x[0])?]);
    for (&configuration, fit) in &fits {
        let mae = Mae {
            value: mae_value(&fit.model, data.points(), f0)?,
            subgradient: mae_subgradient(&fit.model, data.points(), grad)?,
        };
        record.mae.insert(configuration, mae);
    }
    inspect(&ReplicationFits { index: record.index, data: &data, s, fits: &fits });
    Ok(())
}

/// Reports for several sample sizes, in the order given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSuite {
    pub reports: Vec<ExperimentReport>,
}

impl ExperimentSuite {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Rows `n`, columns per configuration, cells `mean±half_width`.
    pub fn write_table<W: Write>(&self, out: W, subgradient: bool) -> Result<()> {
        let configurations: Vec<Configuration> = self
            .reports
            .first()
            .map(|r| r.summaries.iter().map(|s| s.configuration).collect())
            .unwrap_or_default();
        let decimals = if subgradient { 2 } else { 3 };
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["n".to_string()];
        header.extend(configurations.iter().map(Configuration::to_string));
        w.write_record(&header)?;
        for report in &self.reports {
            let mut row = vec![report.n.to_string()];
            for &c in &configurations {
                row.push(report.summary(c).map_or(String::new(), |s| {
                    if subgradient { s.subgradient.cell(decimals) } else { s.value.cell(decimals) }
                }));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per replication and configuration; failed replications
    /// appear with empty MAE cells and their reason.
    pub fn write_raw<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "replication", "seed", "configuration", "mae_value", "mae_subgradient", "failure"])?;
        for report in &self.reports {
            for rec in &report.replications {
                for s in &report.summaries {
                    let (value, sub) = rec
                        .mae
                        .get(&s.configuration)
                        .map_or((String::new(), String::new()), |m| (m.value.to_string(), m.subgradient.to_string()));
                    w.write_record([
                        report.n.to_string(),
                        rec.index.to_string(),
                        rec.seed.to_string(),
                        s.configuration.to_string(),
                        value,
                        sub,
                        rec.failure.clone().unwrap_or_default(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `report.json`, `table_value.csv`, `table_subgradient.csv` and
    /// `replications.csv` into `dir`.
    pub fn write_all(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()? + "\n")?;
        self.write_table(std::fs::File::create(dir.join("table_value.csv"))?, false)?;
        self.write_table(std::fs::File::create(dir.join("table_subgradient.csv"))?, true)?;
        self.write_raw(std::fs::File::create(dir.join("replications.csv"))?)?;
        Ok(())
    }
}
