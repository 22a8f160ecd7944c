//! Output tables and audit records: suite, frontier and ablation CSVs,
//! evidence-size histograms, and cross-seed aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::datamodel::Trace;
use crate::error::{Result, ToeError};
use crate::metrics::MetricsReport;
use crate::search::{Abstention, ExhaustionStats, SpuriousReport};

pub const SUITE_COLUMNS: [&str; 11] = [
    "method",
    "k",
    "auroc",
    "auprc",
    "fidelity_mae",
    "ece",
    "comprehensiveness",
    "mean_evidence",
    "exhaustion_rate",
    "n",
    "seed",
];

pub const ABLATION_COLUMNS: [&str; 10] = [
    "config",
    "seed",
    "k",
    "auroc",
    "fidelity_mae",
    "comprehensiveness",
    "mean_evidence",
    "exhaustion_rate",
    "same_masks_as_full",
    "n",
];

/// `text` with every line prefixed by `# `.
pub fn comment_block(text: &str) -> String {
    text.lines().map(|l| format!("# {l}\n")).collect()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn suite_csv(rows: &[MetricsReport], config: Option<&str>) -> String {
    let mut out = config.map(comment_block).unwrap_or_default();
    out.push_str(&SUITE_COLUMNS.join(","));
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.k,
            r.auroc,
            r.auprc,
            r.fidelity_mae,
            r.ece,
            r.comprehensiveness,
            r.mean_evidence,
            opt(r.exhaustion_rate),
            r.n,
            r.seed
        );
    }
    out
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn field<T: std::str::FromStr>(line: usize, name: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| ToeError::Parse {
        line,
        message: format!("bad {name} value {v:?}"),
    })
}

/// Reads back a suite CSV written by [`suite_csv`].
pub fn parse_suite_csv(text: &str) -> Result<Vec<MetricsReport>> {
    let mut lines = data_lines(text);
    let (hline, header) = lines.next().ok_or(ToeError::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    if header != SUITE_COLUMNS.join(",") {
        return Err(ToeError::Parse {
            line: hline,
            message: format!("unexpected header {header:?}"),
        });
    }
    lines
        .map(|(ln, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != SUITE_COLUMNS.len() {
                return Err(ToeError::Parse {
                    line: ln,
                    message: format!("expected {} fields, found {}", SUITE_COLUMNS.len(), f.len()),
                });
            }
            Ok(MetricsReport {
                method: f[0].to_string(),
                k: field(ln, "k", f[1])?,
                auroc: field(ln, "auroc", f[2])?,
                auprc: field(ln, "auprc", f[3])?,
                fidelity_mae: field(ln, "fidelity_mae", f[4])?,
                ece: field(ln, "ece", f[5])?,
                comprehensiveness: field(ln, "comprehensiveness", f[6])?,
                mean_evidence: field(ln, "mean_evidence", f[7])?,
                exhaustion_rate: if f[8] == "NA" {
                    None
                } else {
                    Some(field(ln, "exhaustion_rate", f[8])?)
                },
                n: field(ln, "n", f[9])?,
                seed: field(ln, "seed", f[10])?,
            })
        })
        .collect()
}

fn metric_values(r: &MetricsReport) -> Vec<(&'static str, f64)> {
    let mut v = vec![
        ("auroc", r.auroc),
        ("auprc", r.auprc),
        ("fidelity_mae", r.fidelity_mae),
        ("ece", r.ece),
        ("comprehensiveness", r.comprehensiveness),
        ("mean_evidence", r.mean_evidence),
    ];
    if let Some(e) = r.exhaustion_rate {
        v.push(("exhaustion_rate", e));
    }
    v
}

/// Long-format rows for plotting metric against budget, one row per
/// (method, k, metric), averaged over seeds.
pub fn frontier_csv(rows: &[MetricsReport], config: Option<&str>) -> String {
    let mut out = config.map(comment_block).unwrap_or_default();
    out.push_str("method,k,metric,value\n");
    for a in aggregate(rows) {
        let _ = writeln!(out, "{},{},{},{}", a.method, a.k, a.metric, a.mean);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub k: usize,
    pub auroc: f64,
    pub fidelity_mae: f64,
    pub comprehensiveness: f64,
    pub mean_evidence: f64,
    pub exhaustion_rate: Option<f64>,
    /// Whether every instance got the same mask as the full objective.
    pub same_masks_as_full: Option<bool>,
    pub n: usize,
}

impl AblationRow {
    pub fn from_report(config: &str, r: &MetricsReport, same_masks_as_full: Option<bool>) -> Self {
        AblationRow {
            config: config.to_string(),
            seed: r.seed,
            k: r.k,
            auroc: r.auroc,
            fidelity_mae: r.fidelity_mae,
            comprehensiveness: r.comprehensiveness,
            mean_evidence: r.mean_evidence,
            exhaustion_rate: r.exhaustion_rate,
            same_masks_as_full,
            n: r.n,
        }
    }
}

pub fn ablation_csv(rows: &[AblationRow], config: Option<&str>) -> String {
    let mut out = config.map(comment_block).unwrap_or_default();
    out.push_str(&ABLATION_COLUMNS.join(","));
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.config,
            r.seed,
            r.k,
            r.auroc,
            r.fidelity_mae,
            r.comprehensiveness,
            r.mean_evidence,
            opt(r.exhaustion_rate),
            opt(r.same_masks_as_full),
            r.n
        );
    }
    out
}

/// Counts of final evidence sizes; bin `i` holds traces with `i` units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Histogram {
    pub counts: Vec<usize>,
}

impl Histogram {
    fn new(cap: usize) -> Self {
        Histogram { counts: vec![0; cap + 1] }
    }

    fn add(&mut self, size: usize) {
        let last = self.counts.len() - 1;
        self.counts[size.min(last)] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Fraction of mass in the last bin.
    pub fn at_cap(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            0.0
        } else {
            self.counts[self.counts.len() - 1] as f64 / n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvidenceHistograms {
    pub cap: usize,
    pub converged: Histogram,
    pub exhausted: Histogram,
    pub correct: Histogram,
    pub incorrect: Histogram,
}

/// Evidence-size histograms split by search outcome and by whether the
/// full-input decision matches the label. Sizes above `cap` land in the
/// last bin.
pub fn evidence_histograms(traces: &[Trace], labels: &[bool], cap: usize) -> Result<EvidenceHistograms> {
    if traces.len() != labels.len() {
        return Err(ToeError::dim("one label per trace required"));
    }
    let mut h = EvidenceHistograms {
        cap,
        converged: Histogram::new(cap),
        exhausted: Histogram::new(cap),
        correct: Histogram::new(cap),
        incorrect: Histogram::new(cap),
    };
    for (t, &y) in traces.iter().zip(labels) {
        let size = t.evidence_size();
        if t.exhausted() {
            h.exhausted.add(size);
        } else {
            h.converged.add(size);
        }
        if t.y_hat_full == y {
            h.correct.add(size);
        } else {
            h.incorrect.add(size);
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub config: Option<String>,
    pub n: usize,
    /// `None` when the model predicts no positives.
    pub exhaustion: Option<ExhaustionStats>,
    pub abstention: Abstention,
    pub histograms: EvidenceHistograms,
    pub spurious: Option<SpuriousReport>,
}

/// Mean and sample standard deviation of one metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub method: String,
    pub k: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

/// Groups rows by (method, k) in first-appearance order.
pub fn aggregate(rows: &[MetricsReport]) -> Vec<Aggregate> {
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut groups: BTreeMap<(String, usize), Vec<&MetricsReport>> = BTreeMap::new();
    for r in rows {
        let key = (r.method.clone(), r.k);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let mut out = Vec::new();
    for key in order {
        let group = &groups[&key];
        let mut by_metric: Vec<(&'static str, Vec<f64>)> = Vec::new();
        for r in group {
            for (name, v) in metric_values(r) {
                match by_metric.iter_mut().find(|(n, _)| *n == name) {
                    Some((_, vals)) => vals.push(v),
                    None => by_metric.push((name, vec![v])),
                }
            }
        }
        for (name, vals) in by_metric {
            let (mean, std) = mean_std(&vals);
            out.push(Aggregate {
                method: key.0.clone(),
                k: key.1,
                metric: name.to_string(),
                mean,
                std,
                n_seeds: vals.len(),
            });
        }
    }
    out
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate_csv(aggs: &[Aggregate], config: Option<&str>) -> String {
    let mut out = config.map(comment_block).unwrap_or_default();
    out.push_str("method,k,metric,mean,std,n_seeds\n");
    for a in aggs {
        let _ = writeln!(out, "{},{},{},{},{},{}", a.method, a.k, a.metric, a.mean, a.std, a.n_seeds);
    }
    out
}
