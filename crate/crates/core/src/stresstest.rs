//! Monte Carlo stress testing of a fixed dispatch against prior contingencies.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::math::{quantile_type7, sigmoid};
use crate::netmodel::Dispatch;
use crate::powerflow::Contingency;
use crate::rng::{self, domain};
use crate::severity::{PriorParams, Scorer};

pub const DEFAULT_OUTAGE_THRESHOLD: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StressError {
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("outage threshold must lie in (0, 1), got {0}")]
    Threshold(f64),
    #[error("reports are not comparable: {0}")]
    Mismatch(String),
}

/// Lines with σ(yᵢ) below `threshold`.
pub fn outage_count(contingency: &Contingency, threshold: f64) -> usize {
    contingency.y.iter().filter(|&&y| sigmoid(y) < threshold).count()
}

/// The `m` prior contingencies drawn by a stress test with this seed.
pub fn sample_contingencies(prior: &PriorParams, n_lines: usize, m: usize, seed: u64) -> Vec<Contingency> {
    (0..m).map(|i| sample_at(prior, n_lines, seed, i)).collect()
}

fn sample_at(prior: &PriorParams, n_lines: usize, seed: u64, index: usize) -> Contingency {
    prior.sample(&mut rng::stream(&[seed, domain::STRESS, index as u64]), n_lines)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample: usize,
    pub outage_count: usize,
    /// `None` when the solver returned an error.
    pub severity: Option<f64>,
    pub failed: bool,
    pub converged: bool,
    pub error: Option<String>,
}

/// Type-7 quantiles of the sampled severities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub p05: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
    pub max: f64,
}

impl Quantiles {
    pub const LEVELS: [f64; 7] = [0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0];

    pub fn from_sorted(sorted: &[f64]) -> Option<Self> {
        if sorted.is_empty() {
            return None;
        }
        let q = Self::LEVELS.map(|p| quantile_type7(sorted, p));
        Some(Self {
            min: q[0],
            p05: q[1],
            p25: q[2],
            p50: q[3],
            p75: q[4],
            p95: q[5],
            max: q[6],
        })
    }

    pub fn as_array(&self) -> [f64; 7] {
        [self.min, self.p05, self.p25, self.p50, self.p75, self.p95, self.max]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressReport {
    pub samples: usize,
    pub failures: usize,
    /// Failed samples whose power flow did not converge.
    pub nonconverged: usize,
    /// Samples the solver rejected outright; counted as failures.
    pub errors: usize,
    pub failure_rate: f64,
    /// `None` only if every sample errored.
    pub severity_quantiles: Option<Quantiles>,
    /// Outage count → number of failed samples with that many outages.
    pub outage_histogram: BTreeMap<usize, usize>,
    /// Fraction of samples strictly more severe than every predicted
    /// contingency; errored samples count as exceeding.
    pub coverage_exceedance: Option<f64>,
    pub predicted_max_severity: Option<f64>,
    pub seed: u64,
    pub outage_threshold: f64,
    pub prior: PriorParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StressOptions {
    pub samples: usize,
    pub seed: u64,
    pub outage_threshold: f64,
}

impl StressOptions {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self {
            samples,
            seed,
            outage_threshold: DEFAULT_OUTAGE_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<(), StressError> {
        if self.samples == 0 {
            return Err(StressError::NoSamples);
        }
        if !(self.outage_threshold > 0.0 && self.outage_threshold < 1.0) {
            return Err(StressError::Threshold(self.outage_threshold));
        }
        Ok(())
    }
}

/// Stress test `dispatch` with `options.samples` prior contingencies.
pub fn stress_test(
    scorer: &Scorer,
    dispatch: &Dispatch,
    predicted: Option<&[Contingency]>,
    options: &StressOptions,
) -> Result<StressReport, StressError> {
    stress_test_detailed(scorer, dispatch, predicted, options).map(|(r, _)| r)
}

/// [`stress_test`] also returning one record per sample, in sample order.
pub fn stress_test_detailed(
    scorer: &Scorer,
    dispatch: &Dispatch,
    predicted: Option<&[Contingency]>,
    options: &StressOptions,
) -> Result<(StressReport, Vec<SampleRecord>), StressError> {
    options.validate()?;
    let n_lines = scorer.network.n_branches();
    let records = exec::map_indexed(options.samples, |i| {
        let y = sample_at(&scorer.prior, n_lines, options.seed, i);
        let outages = outage_count(&y, options.outage_threshold);
        match scorer.score(dispatch, &y) {
            Ok(r) => SampleRecord {
                sample: i,
                outage_count: outages,
                severity: Some(r.severity),
                failed: r.is_failure(),
                converged: r.converged,
                error: None,
            },
            Err(e) => SampleRecord {
                sample: i,
                outage_count: outages,
                severity: None,
                failed: true,
                converged: false,
                error: Some(e.to_string()),
            },
        }
    });

    let predicted_max = predicted.filter(|p| !p.is_empty()).map(|set| {
        exec::map_indexed(set.len(), |j| match scorer.score(dispatch, &set[j]) {
            Ok(r) => r.severity,
            Err(_) => f64::INFINITY,
        })
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max)
    });

    let report = aggregate(&records, predicted_max, options, scorer.prior.clone());
    Ok((report, records))
}

fn aggregate(records: &[SampleRecord], predicted_max: Option<f64>, options: &StressOptions, prior: PriorParams) -> StressReport {
    let mut failures = 0;
    let mut nonconverged = 0;
    let mut errors = 0;
    let mut histogram = BTreeMap::new();
    for r in records {
        if r.error.is_some() {
            errors += 1;
        }
        if r.failed {
            failures += 1;
            if !r.converged {
                nonconverged += 1;
            }
            *histogram.entry(r.outage_count).or_insert(0) += 1;
        }
    }
    let mut severities: Vec<f64> = records.iter().filter_map(|r| r.severity).collect();
    severities.sort_by(f64::total_cmp);
    let coverage = predicted_max.map(|worst| {
        let exceed = records
            .iter()
            .filter(|r| r.severity.is_none_or(|s| s > worst))
            .count();
        exceed as f64 / records.len() as f64
    });
    StressReport {
        samples: records.len(),
        failures,
        nonconverged,
        errors,
        failure_rate: failures as f64 / records.len() as f64,
        severity_quantiles: Quantiles::from_sorted(&severities),
        outage_histogram: histogram,
        coverage_exceedance: coverage,
        predicted_max_severity: predicted_max,
        seed: options.seed,
        outage_threshold: options.outage_threshold,
        prior,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureModeRow {
    pub outages: usize,
    pub failures_a: usize,
    pub failures_b: usize,
    /// `failures_a / failures_b`; `None` when `failures_b` is zero.
    pub ratio: Option<f64>,
}

impl FailureModeRow {
    pub fn undefined(&self) -> bool {
        self.ratio.is_none()
    }
}

/// Ratio of failure counts per outage level. Both reports must come from the
/// same sample count, seed and prior.
pub fn failure_mode_comparison(a: &StressReport, b: &StressReport) -> Result<Vec<FailureModeRow>, StressError> {
    if a.samples != b.samples {
        return Err(StressError::Mismatch(format!("sample counts differ ({} vs {})", a.samples, b.samples)));
    }
    if a.seed != b.seed {
        return Err(StressError::Mismatch(format!("seeds differ ({} vs {})", a.seed, b.seed)));
    }
    if a.prior != b.prior || a.outage_threshold != b.outage_threshold {
        return Err(StressError::Mismatch("priors or outage thresholds differ".into()));
    }
    let mut levels: Vec<usize> = a.outage_histogram.keys().chain(b.outage_histogram.keys()).copied().collect();
    levels.sort_unstable();
    levels.dedup();
    Ok(levels
        .into_iter()
        .map(|k| {
            let fa = a.outage_histogram.get(&k).copied().unwrap_or(0);
            let fb = b.outage_histogram.get(&k).copied().unwrap_or(0);
            FailureModeRow {
                outages: k,
                failures_a: fa,
                failures_b: fb,
                ratio: (fb > 0).then(|| fa as f64 / fb as f64),
            }
        })
        .collect())
}

/// CSV: `sample,outage_count,severity,failed,converged`. Errored samples
/// have an empty severity cell.
pub fn write_samples_csv<W: Write>(mut out: W, records: &[SampleRecord]) -> io::Result<()> {
    writeln!(out, "sample,outage_count,severity,failed,converged")?;
    for r in records {
        let s = r.severity.map(|s| s.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{}", r.sample, r.outage_count, s, r.failed as u8, r.converged as u8)?;
    }
    Ok(())
}
