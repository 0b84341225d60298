//! Draw tables, posterior quantile summaries and truth coverage.
//!
//! Draw columns are named so a summary can be rebuilt from the CSV alone:
//! `theta`, `log_det`, `diag_fro2`, `lower_fro2`, `omega_sorted_{j}` (1-based,
//! ascending), and for seasonal fits the same statistics per block prefixed
//! with `c{c}_s{s}_`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::simulate::{BlockStats, GroundTruth, Stats};

/// Columns written before the statistics.
pub const META_COLUMNS: [&str; 5] = ["chain", "draw", "log_density", "accept_prob", "divergent"];

#[derive(Debug, Clone, PartialEq)]
pub struct DrawTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl DrawTable {
    pub fn new(columns: Vec<String>) -> Self {
        Self { columns, rows: Vec::new() }
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let i = self.index(name).ok_or_else(|| HarnessError::Fit(format!("draw table has no column {name:?}")))?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let wrap = |e: csv::Error| HarnessError::Csv { path: path.to_path_buf(), line: 0, message: e.to_string() };
        let mut w = csv::Writer::from_path(path).map_err(wrap)?;
        w.write_record(&self.columns).map_err(wrap)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(wrap)?;
        }
        w.flush().map_err(|e| HarnessError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let wrap = |line: u64, message: String| HarnessError::Csv { path: path.to_path_buf(), line, message };
        let mut r = csv::Reader::from_path(path).map_err(|e| wrap(0, e.to_string()))?;
        let columns: Vec<String> = r.headers().map_err(|e| wrap(1, e.to_string()))?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| wrap(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            let row = rec
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| wrap(line, format!("{f:?} is not a number"))))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
    pub mean: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(HarnessError::Fit("no draws to summarize".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(Self {
            q025: quantile_sorted(&v, 0.025),
            q50: quantile_sorted(&v, 0.5),
            q975: quantile_sorted(&v, 0.975),
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }

    pub fn contains(&self, x: f64) -> bool {
        self.q025 <= x && x <= self.q975
    }

    pub fn overlaps(&self, other: &Self) -> bool {
        self.q025 <= other.q975 && other.q025 <= self.q975
    }
}

/// Linear interpolation between order statistics at `(n−1) p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub kind: String,
    pub k: usize,
    pub n_chains: usize,
    pub n_draws: usize,
    pub stats: Stats<Quantiles>,
    #[serde(default)]
    pub blocks: Vec<BlockStats<Quantiles>>,
}

fn stats_with_prefix(t: &DrawTable, prefix: &str, k: usize) -> Result<Stats<Quantiles>> {
    let q = |name: &str| Quantiles::of(&t.column(&format!("{prefix}{name}"))?);
    Ok(Stats {
        omega_sorted: (1..=k).map(|j| q(&format!("omega_sorted_{j}"))).collect::<Result<_>>()?,
        theta: Some(Quantiles::of(&t.column("theta")?)?),
        log_det: q("log_det")?,
        diag_fro2: q("diag_fro2")?,
        lower_fro2: q("lower_fro2")?,
    })
}

/// Rebuilds the summary from draw columns.
pub fn summarize(t: &DrawTable) -> Result<PosteriorSummary> {
    let k = t.columns.iter().filter(|c| c.starts_with("omega_sorted_")).count();
    if k == 0 {
        return Err(HarnessError::Fit("draw table has no omega_sorted columns".into()));
    }
    let chains = t.column("chain")?;
    let mut ids: Vec<u64> = chains.iter().map(|c| *c as u64).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut blocks = Vec::new();
    for col in &t.columns {
        if let Some((cycle, season)) = col.strip_suffix("_log_det").and_then(parse_block_prefix) {
            blocks.push(BlockStats { cycle, season, stats: stats_with_prefix(t, &block_prefix(cycle, season), k)? });
        }
    }
    Ok(PosteriorSummary {
        kind: if blocks.is_empty() { "static" } else { "dynamic" }.into(),
        k,
        n_chains: ids.len(),
        n_draws: t.rows.len(),
        stats: stats_with_prefix(t, "", k)?,
        blocks,
    })
}

pub fn block_prefix(cycle: usize, season: usize) -> String {
    format!("c{cycle}_s{season}_")
}

/// `c{c}_s{s}` to `(c, s)`.
fn parse_block_prefix(p: &str) -> Option<(usize, usize)> {
    let (c, s) = p.strip_prefix('c')?.split_once("_s")?;
    Some((c.parse().ok()?, s.parse().ok()?))
}

/// One truth value against its posterior interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageEntry {
    pub name: String,
    pub truth: f64,
    pub interval: Quantiles,
    pub covered: bool,
}

/// Sorted weights with fewer true than fitted components are compared on the
/// largest ones, and the missing true values are zero.
fn padded_truth(truth: &[f64], k: usize) -> Vec<f64> {
    let mut t = vec![0.0; k.saturating_sub(truth.len())];
    t.extend_from_slice(&truth[truth.len().saturating_sub(k)..]);
    t
}

fn compare_stats(prefix: &str, truth: &Stats<f64>, post: &Stats<Quantiles>, out: &mut Vec<CoverageEntry>) {
    let mut push = |name: String, t: f64, q: Quantiles| {
        out.push(CoverageEntry { name: format!("{prefix}{name}"), truth: t, interval: q, covered: q.contains(t) })
    };
    for (j, (t, q)) in padded_truth(&truth.omega_sorted, post.omega_sorted.len()).iter().zip(&post.omega_sorted).enumerate() {
        push(format!("omega_sorted_{}", j + 1), *t, *q);
    }
    push("log_det".into(), truth.log_det, post.log_det);
    push("diag_fro2".into(), truth.diag_fro2, post.diag_fro2);
    push("lower_fro2".into(), truth.lower_fro2, post.lower_fro2);
}

/// Joins a ground-truth record with a summary on statistic names.
pub fn coverage(truth: &GroundTruth, post: &PosteriorSummary) -> Result<Vec<CoverageEntry>> {
    let mut out = Vec::new();
    if truth.blocks.is_empty() {
        compare_stats("", &truth.stats, &post.stats, &mut out);
        return Ok(out);
    }
    for tb in &truth.blocks {
        let pb = post
            .blocks
            .iter()
            .find(|b| b.cycle == tb.cycle && b.season == tb.season)
            .ok_or_else(|| HarnessError::Fit(format!("summary has no block ({}, {})", tb.cycle, tb.season)))?;
        compare_stats(&block_prefix(tb.cycle, tb.season), &tb.stats, &pb.stats, &mut out);
    }
    Ok(out)
}
