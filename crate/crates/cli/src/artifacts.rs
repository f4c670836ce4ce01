//! Run artifacts: CSV tables, the run summary and content digests.
//!
//! Every artifact except `timings.txt` is byte-deterministic for a given
//! scenario and seed: floats are printed with the shortest round-trip
//! representation and all reductions upstream are fixed-order. Wall-clock
//! timings go to their own file so reruns can be compared byte-for-byte.

use smp_lab_core::ensemble::PathArray;
use smp_lab_core::TimeGrid;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

/// FNV-1a 64-bit content digest (hex), used for config fingerprints.
pub fn digest(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    format!("{hash:016x}")
}

/// Collected metrics and flags of one command run.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub command: String,
    pub tag: String,
    pub config_digest: String,
    pub seed: u64,
    pub paths: usize,
    pub metrics: Vec<(String, f64)>,
    pub flags: Vec<(String, bool)>,
    pub timings: Vec<(String, Duration)>,
}

impl RunSummary {
    pub fn new(command: &str, tag: &str, config_digest: String, seed: u64, paths: usize) -> Self {
        Self {
            command: command.to_string(),
            tag: tag.to_string(),
            config_digest,
            seed,
            paths,
            ..Default::default()
        }
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.push((name.to_string(), value));
    }

    pub fn flag(&mut self, name: &str, passed: bool) {
        self.flags.push((name.to_string(), passed));
    }

    pub fn timing(&mut self, name: &str, elapsed: Duration) {
        self.timings.push((name.to_string(), elapsed));
    }

    pub fn all_passed(&self) -> bool {
        self.flags.iter().all(|(_, ok)| *ok)
    }

    /// Deterministic part of the summary.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command: {}", self.command);
        let _ = writeln!(out, "scenario: {}", self.tag);
        let _ = writeln!(out, "config_digest: {}", self.config_digest);
        let _ = writeln!(out, "seed: {}", self.seed);
        let _ = writeln!(out, "paths: {}", self.paths);
        for (name, value) in &self.metrics {
            let _ = writeln!(out, "{name}: {value}");
        }
        for (name, ok) in &self.flags {
            let _ = writeln!(out, "check {}: {}", name, if *ok { "PASS" } else { "FAIL" });
        }
        out
    }

    fn render_timings(&self) -> String {
        let mut out = String::new();
        for (name, elapsed) in &self.timings {
            let _ = writeln!(out, "{name}: {:.3}s", elapsed.as_secs_f64());
        }
        out
    }
}

/// Output directory of one run.
pub struct ArtifactDir {
    root: PathBuf,
}

impl ArtifactDir {
    pub fn create(root: &Path) -> io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> io::Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, contents)?;
        Ok(path)
    }

    /// Per-node process summary: `t, mean, var, p05, p50, p95`.
    pub fn write_process_summary(
        &self,
        name: &str,
        grid: &TimeGrid,
        values: &PathArray,
    ) -> io::Result<PathBuf> {
        let mut out = String::from("t,mean,var,p05,p50,p95\n");
        for i in 0..grid.n_nodes() {
            let mean = values.node_mean(i);
            let var = values.node_variance(i);
            let p05 = values.node_quantile(i, 0.05);
            let p50 = values.node_quantile(i, 0.50);
            let p95 = values.node_quantile(i, 0.95);
            let _ = writeln!(out, "{},{},{},{},{},{}", grid.node(i), mean, var, p05, p50, p95);
        }
        self.write(name, &out)
    }

    /// Iteration gap table: `k, gap, ratio` (ratio empty on the first row).
    pub fn write_gap_table(&self, name: &str, gaps: &[f64]) -> io::Result<PathBuf> {
        let mut out = String::from("k,gap,ratio\n");
        for (k, gap) in gaps.iter().enumerate() {
            if k == 0 {
                let _ = writeln!(out, "{k},{gap},");
            } else {
                let _ = writeln!(out, "{k},{gap},{}", gap / gaps[k - 1]);
            }
        }
        self.write(name, &out)
    }

    /// Writes `run_summary.txt` (deterministic) and `timings.txt`
    /// (wall-clock, excluded from determinism comparisons).
    pub fn write_summary(&self, summary: &RunSummary) -> io::Result<PathBuf> {
        self.write("timings.txt", &summary.render_timings())?;
        self.write("run_summary.txt", &summary.render())
    }
}
