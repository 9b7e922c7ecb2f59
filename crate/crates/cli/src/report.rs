//! Output files and the hashed manifest.
//!
//! Every JSON output carries `schema_version`; bump it whenever a JSON field
//! or a CSV column changes.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use scopf_core::scopf::{PredictedContingency, RoundSummary, ScopfResult};
use scopf_core::stresstest::{self, outage_count, FailureModeRow, SampleRecord, StressReport};
use scopf_core::Contingency;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Wall-clock data; not hashed since it differs between reruns.
pub const TIMING_FILE: &str = "timing.json";
/// Bins in `severity_distribution.csv`.
pub const SEVERITY_BINS: usize = 50;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    pub fn new(name: &str, bytes: impl Into<Vec<u8>>) -> Self {
        Self {
            name: name.into(),
            bytes: bytes.into(),
        }
    }

    pub fn json<T: Serialize>(name: &str, value: &T) -> Self {
        let mut text = serde_json::to_string_pretty(value).expect("serialisable output");
        text.push('\n');
        Self::new(name, text)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    /// Sorted by path.
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn hash_of(&self, path: &str) -> Option<&str> {
        self.files.iter().find(|f| f.path == path).map(|f| f.sha256.as_str())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").unwrap();
    }
    out
}

/// Write `artifacts` into `out_dir` and then `manifest.json` describing them.
pub fn write_artifacts(out_dir: &Path, command: &str, artifacts: &[Artifact]) -> io::Result<Manifest> {
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::with_capacity(artifacts.len());
    for a in artifacts {
        fs::write(out_dir.join(&a.name), &a.bytes)?;
        files.push(ManifestEntry {
            path: a.name.clone(),
            sha256: sha256_hex(&a.bytes),
            bytes: a.bytes.len() as u64,
        });
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        command: command.into(),
        files,
    };
    let m = Artifact::json(MANIFEST_FILE, &manifest);
    fs::write(out_dir.join(&m.name), &m.bytes)?;
    Ok(manifest)
}

pub fn read_manifest(out_dir: &Path) -> io::Result<Manifest> {
    let text = fs::read_to_string(out_dir.join(MANIFEST_FILE))?;
    serde_json::from_str(&text).map_err(io::Error::other)
}

#[derive(Serialize)]
struct Timing {
    wall_time_s: f64,
    threads: usize,
}

pub fn write_timing(out_dir: &Path, wall_time_s: f64, threads: usize) -> io::Result<()> {
    let a = Artifact::json(TIMING_FILE, &Timing { wall_time_s, threads });
    fs::write(out_dir.join(a.name), a.bytes)
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// `round,mean_Ux,min_Ux,max_Sr,accept_rate_x,accept_rate_y`; missing
/// values are empty cells.
pub fn history_csv(history: &[RoundSummary]) -> String {
    let mut s = String::from("round,mean_Ux,min_Ux,max_Sr,accept_rate_x,accept_rate_y\n");
    for h in history {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            h.round,
            cell(h.mean_ux),
            cell(h.min_ux),
            cell(h.max_sr),
            cell(h.accept_rate_x),
            cell(h.accept_rate_y)
        )
        .unwrap();
    }
    s
}

/// One row per contingency: scores, outage count at `threshold`, then the
/// raw line strengths `y0..y{n-1}`.
pub fn contingencies_csv(contingencies: &[PredictedContingency], n_lines: usize, threshold: f64) -> String {
    let mut s = String::from("index,severity,risk_adjusted,log_prior,economic_cost,converged,failed,outage_count");
    for i in 0..n_lines {
        write!(s, ",y{i}").unwrap();
    }
    s.push('\n');
    for (j, c) in contingencies.iter().enumerate() {
        let r = &c.report;
        write!(
            s,
            "{j},{},{},{},{},{},{},{}",
            r.severity,
            cell(r.risk_adjusted),
            cell(r.log_prior),
            r.economic_cost,
            r.converged as u8,
            r.is_failure() as u8,
            outage_count(&Contingency::new(c.y.clone()), threshold)
        )
        .unwrap();
        for y in &c.y {
            write!(s, ",{y}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Equal-width histogram of sampled severities between their min and max.
/// Errored samples have no severity and are left out.
pub fn severity_distribution_csv(records: &[SampleRecord], bins: usize) -> String {
    let mut s = String::from("bin,lower,upper,count,fraction\n");
    let sev: Vec<f64> = records.iter().filter_map(|r| r.severity).filter(|v| v.is_finite()).collect();
    if sev.is_empty() || bins == 0 {
        return s;
    }
    let lo = sev.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n_bins = if hi > lo { bins } else { 1 };
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for v in &sev {
        let k = if width > 0.0 { ((v - lo) / width) as usize } else { 0 };
        counts[k.min(n_bins - 1)] += 1;
    }
    for (k, c) in counts.iter().enumerate() {
        let lower = lo + k as f64 * width;
        let upper = if k + 1 == n_bins { hi } else { lo + (k + 1) as f64 * width };
        writeln!(s, "{k},{lower},{upper},{c},{}", *c as f64 / records.len() as f64).unwrap();
    }
    s
}

/// `outages,failures`, one row per outage count seen among failures.
pub fn outage_histogram_csv(report: &StressReport) -> String {
    let mut s = String::from("outages,failures\n");
    for (k, n) in &report.outage_histogram {
        writeln!(s, "{k},{n}").unwrap();
    }
    s
}

pub fn samples_csv(records: &[SampleRecord]) -> String {
    let mut buf = Vec::new();
    stresstest::write_samples_csv(&mut buf, records).expect("write to Vec");
    String::from_utf8(buf).expect("ASCII CSV")
}

pub fn failure_modes_csv(rows: &[FailureModeRow]) -> String {
    let mut s = String::from("outages,failures_a,failures_b,ratio\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.outages, r.failures_a, r.failures_b, cell(r.ratio)).unwrap();
    }
    s
}

#[derive(Serialize, Deserialize)]
pub struct ResultFile {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub result: ScopfResult,
}

/// Files for a `solve` or `baseline` run.
pub fn scopf_artifacts(command: &str, seed: u64, result: &ScopfResult, n_lines: usize, threshold: f64) -> Vec<Artifact> {
    let file = ResultFile {
        schema_version: SCHEMA_VERSION,
        command: command.into(),
        seed,
        result: result.clone(),
    };
    vec![
        Artifact::json("result.json", &file),
        Artifact::new("history.csv", history_csv(&result.history)),
        Artifact::new("contingencies.csv", contingencies_csv(&result.contingencies, n_lines, threshold)),
    ]
}

/// Write the files for a `solve` or `baseline` run and return the manifest.
pub fn emit_reports(
    out_dir: &Path,
    command: &str,
    seed: u64,
    result: &ScopfResult,
    n_lines: usize,
    threshold: f64,
) -> io::Result<Manifest> {
    write_artifacts(out_dir, command, &scopf_artifacts(command, seed, result, n_lines, threshold))
}
