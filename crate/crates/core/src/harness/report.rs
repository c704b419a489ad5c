use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::config::ExperimentConfig;
use super::pipeline::METRICS_FILE;
use super::{io_error, write_file, HarnessError};
use crate::graph::Variant;

pub const REPORT_TABLE_FILE: &str = "report.txt";
pub const REPORT_KV_FILE: &str = "report.kv";

const ABSENT: &str = "n/a";

/// Parses `key = value` lines, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn read_metrics(path: &Path) -> Result<BTreeMap<String, String>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    parse_kv(&text).map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display())))
}

fn metric(map: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<Option<f64>, HarnessError> {
    match map.get(key).map(String::as_str) {
        None => Err(HarnessError::Runtime(format!(
            "{}: missing `{key}`",
            path.display()
        ))),
        Some("absent") => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|e| HarnessError::Runtime(format!("{}: `{key}`: {e}", path.display()))),
    }
}

/// Mean and sample standard deviation over the seeds where the metric exists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricStats {
    pub n: usize,
    pub mean: Option<f64>,
    /// Absent for fewer than two values.
    pub sd: Option<f64>,
}

impl MetricStats {
    pub fn from_values(values: &[Option<f64>]) -> Self {
        let present: Vec<f64> = values.iter().flatten().copied().collect();
        let n = present.len();
        let mean = (n > 0).then(|| present.iter().sum::<f64>() / n as f64);
        let sd = match (n, mean) {
            (2.., Some(m)) => Some(
                (present.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt(),
            ),
            _ => None,
        };
        Self { n, mean, sd }
    }

    fn cell(&self) -> String {
        match (self.mean, self.sd) {
            (Some(m), Some(s)) => format!("{m:.5} ± {s:.5}"),
            (Some(m), None) => format!("{m:.5} ± {ABSENT}"),
            _ => ABSENT.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub cvr_auc: Vec<Option<f64>>,
    pub ctcvr_auc: Vec<Option<f64>>,
}

impl VariantRow {
    pub fn cvr_stats(&self) -> MetricStats {
        MetricStats::from_values(&self.cvr_auc)
    }

    pub fn ctcvr_stats(&self) -> MetricStats {
        MetricStats::from_values(&self.ctcvr_auc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<VariantRow>,
    /// `(cvr_auc, ctcvr_auc)` of ground-truth scoring, when available.
    pub oracle: Option<(Option<f64>, Option<f64>)>,
}

fn wins(a: &[Option<f64>], b: &[Option<f64>]) -> usize {
    a.iter()
        .zip(b)
        .filter(|(x, y)| matches!((x, y), (Some(x), Some(y)) if x > y))
        .count()
}

impl ComparisonReport {
    pub fn row(&self, variant: Variant) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Seeds on which `a` scores strictly higher than `b`: `(cvr, ctcvr)`.
    pub fn wins(&self, a: Variant, b: Variant) -> Option<(usize, usize)> {
        let (ra, rb) = (self.row(a)?, self.row(b)?);
        Some((wins(&ra.cvr_auc, &rb.cvr_auc), wins(&ra.ctcvr_auc, &rb.ctcvr_auc)))
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>5}  {:<20} {:<20}",
            "variant", "seeds", "CVR AUC", "CTCVR AUC"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:>5}  {:<20} {:<20}",
                r.variant.label(),
                r.seeds.len(),
                r.cvr_stats().cell(),
                r.ctcvr_stats().cell()
            );
        }
        if let Some((cvr, ctcvr)) = self.oracle {
            let f = |v: Option<f64>| v.map_or(ABSENT.to_string(), |v| format!("{v:.5}"));
            let _ = writeln!(s, "{:<12} {:>5}  {:<20} {:<20}", "oracle", "-", f(cvr), f(ctcvr));
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "seed-matched wins, row over column (CVR AUC / CTCVR AUC)");
        let _ = write!(s, "{:<12}", "");
        for r in &self.rows {
            let _ = write!(s, " {:>9}", r.variant.label());
        }
        let _ = writeln!(s);
        for a in &self.rows {
            let _ = write!(s, "{:<12}", a.variant.label());
            for b in &self.rows {
                if a.variant == b.variant {
                    let _ = write!(s, " {:>9}", "-");
                } else {
                    let (c, t) = self.wins(a.variant, b.variant).expect("rows exist");
                    let _ = write!(s, " {:>9}", format!("{c}/{t}"));
                }
            }
            let _ = writeln!(s);
        }
        let n = self.rows.first().map_or(0, |r| r.seeds.len());
        let _ = writeln!(s, "({n} seeds; ± is the sample standard deviation; AUC is global, CVR on clicked impressions)");
        s
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or(ABSENT.to_string(), |v| v.to_string());
        for r in &self.rows {
            let name = r.variant.name();
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(s, "{name}.seeds = {}", seeds.join(" "));
            for (metric, stats, values) in [
                ("cvr_auc", r.cvr_stats(), &r.cvr_auc),
                ("ctcvr_auc", r.ctcvr_stats(), &r.ctcvr_auc),
            ] {
                let vals: Vec<String> = values.iter().map(|v| opt(*v)).collect();
                let _ = writeln!(s, "{name}.{metric}.values = {}", vals.join(" "));
                let _ = writeln!(s, "{name}.{metric}.n = {}", stats.n);
                let _ = writeln!(s, "{name}.{metric}.mean = {}", opt(stats.mean));
                let _ = writeln!(s, "{name}.{metric}.sd = {}", opt(stats.sd));
            }
        }
        for a in &self.rows {
            for b in &self.rows {
                if a.variant != b.variant {
                    let (c, t) = self.wins(a.variant, b.variant).expect("rows exist");
                    let _ = writeln!(s, "wins.cvr_auc.{}.{} = {c}", a.variant.name(), b.variant.name());
                    let _ = writeln!(s, "wins.ctcvr_auc.{}.{} = {t}", a.variant.name(), b.variant.name());
                }
            }
        }
        if let Some((cvr, ctcvr)) = self.oracle {
            let _ = writeln!(s, "oracle.cvr_auc = {}", opt(cvr));
            let _ = writeln!(s, "oracle.ctcvr_auc = {}", opt(ctcvr));
        }
        s
    }
}

/// Builds the comparison from the persisted per-run metric files and writes
/// `report.txt` and `report.kv` into the output directory.
pub fn cmd_report(config: &ExperimentConfig) -> Result<ComparisonReport, HarnessError> {
    let mut missing = Vec::new();
    let mut rows = Vec::new();
    for &variant in &config.variants {
        let mut row = VariantRow {
            variant,
            seeds: Vec::new(),
            cvr_auc: Vec::new(),
            ctcvr_auc: Vec::new(),
        };
        for &seed in &config.seeds {
            let path = config.run_dir(variant, seed).join(METRICS_FILE);
            if !path.exists() {
                missing.push(format!("{}-seed{seed}", variant.name()));
                continue;
            }
            let m = read_metrics(&path)?;
            row.seeds.push(seed);
            row.cvr_auc.push(metric(&m, "cvr_auc", &path)?);
            row.ctcvr_auc.push(metric(&m, "ctcvr_auc", &path)?);
        }
        rows.push(row);
    }
    if !missing.is_empty() {
        return Err(HarnessError::Runtime(format!(
            "missing runs: {}",
            missing.join(", ")
        )));
    }
    let oracle_path = config.oracle_dir().join(METRICS_FILE);
    let oracle = if oracle_path.exists() {
        let m = read_metrics(&oracle_path)?;
        Some((
            metric(&m, "cvr_auc", &oracle_path)?,
            metric(&m, "ctcvr_auc", &oracle_path)?,
        ))
    } else {
        None
    };
    let report = ComparisonReport { rows, oracle };
    write_file(&config.output_dir.join(REPORT_TABLE_FILE), &report.to_table())?;
    write_file(&config.output_dir.join(REPORT_KV_FILE), &report.to_kv())?;
    Ok(report)
}
