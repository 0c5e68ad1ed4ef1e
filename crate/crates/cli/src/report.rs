//! Line-delimited audit reports and their aggregates.

use std::fmt::Write as _;
use std::path::Path;

use ibis_core::audit::{AuditResult, MechanismPrivacy, TprPoint};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::io::Provenance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    /// Sample standard deviation (`n - 1` denominator); 0 for one value.
    pub std: f64,
    pub median: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                median: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Self { mean, std, median }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub config_hash: String,
    pub tpr: Vec<TprPoint>,
    pub eps_hat: f64,
    pub k_plus: usize,
    pub k_minus: usize,
    pub correct: usize,
    pub gdp_mu: f64,
    pub gdp_epsilon: f64,
    pub confidence: f64,
    pub mechanism: Option<MechanismPrivacy>,
}

impl RunRecord {
    pub fn new(run: usize, config_hash: &str, r: &AuditResult) -> Self {
        Self {
            run,
            seed: r.seed,
            config_hash: config_hash.to_string(),
            tpr: r.tpr_table.clone(),
            eps_hat: r.eps_hat,
            k_plus: r.k_plus,
            k_minus: r.k_minus,
            correct: r.correct,
            gdp_mu: r.gdp_mu,
            gdp_epsilon: r.gdp_epsilon,
            confidence: r.confidence,
            mechanism: r.mechanism,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaStats {
    pub alpha: f64,
    #[serde(flatten)]
    pub stats: Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub tpr: Vec<AlphaStats>,
    pub eps_hat: Stats,
    pub gdp_mu: Stats,
    pub gdp_epsilon: Stats,
}

impl Aggregate {
    /// Aggregates over runs; TPR columns follow the first run's alphas.
    pub fn from_runs(runs: &[RunRecord]) -> Self {
        let alphas: Vec<f64> = runs
            .first()
            .map(|r| r.tpr.iter().map(|p| p.alpha).collect())
            .unwrap_or_default();
        let tpr = alphas
            .iter()
            .map(|&alpha| {
                let v: Vec<f64> = runs
                    .iter()
                    .filter_map(|r| r.tpr.iter().find(|p| p.alpha == alpha).map(|p| p.tpr))
                    .collect();
                AlphaStats {
                    alpha,
                    stats: Stats::of(&v),
                }
            })
            .collect();
        let col = |f: fn(&RunRecord) -> f64| Stats::of(&runs.iter().map(f).collect::<Vec<_>>());
        Self {
            runs: runs.len(),
            tpr,
            eps_hat: col(|r| r.eps_hat),
            gdp_mu: col(|r| r.gdp_mu),
            gdp_epsilon: col(|r| r.gdp_epsilon),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum ReportLine {
    Provenance {
        provenance: Provenance,
        seeds: Vec<u64>,
        /// Resolved configuration, defaults included.
        config: serde_json::Value,
    },
    Run(RunRecord),
    Aggregate(Aggregate),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub provenance: Provenance,
    pub seeds: Vec<u64>,
    pub config: serde_json::Value,
    pub runs: Vec<RunRecord>,
    pub aggregate: Aggregate,
}

impl Report {
    pub fn new(provenance: Provenance, config: serde_json::Value, runs: Vec<RunRecord>) -> Self {
        Self {
            seeds: runs.iter().map(|r| r.seed).collect(),
            aggregate: Aggregate::from_runs(&runs),
            provenance,
            config,
            runs,
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![ReportLine::Provenance {
            provenance: self.provenance.clone(),
            seeds: self.seeds.clone(),
            config: self.config.clone(),
        }];
        lines.extend(self.runs.iter().cloned().map(ReportLine::Run));
        lines.push(ReportLine::Aggregate(self.aggregate.clone()));
        lines
            .iter()
            .map(|l| serde_json::to_string(l).expect("report serialises") + "\n")
            .collect()
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, CliError> {
        let mut provenance = None;
        let mut runs = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: ReportLine = serde_json::from_str(line)
                .map_err(|e| CliError::Input(format!("report line {}: {e}", i + 1)))?;
            match rec {
                ReportLine::Provenance { provenance: p, config, .. } => provenance = Some((p, config)),
                ReportLine::Run(r) => runs.push(r),
                ReportLine::Aggregate(_) => {}
            }
        }
        let (p, config) = provenance.ok_or_else(|| CliError::Input("report has no provenance record".into()))?;
        Ok(Self::new(p, config, runs))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse_jsonl(&text)
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "ibis audit report  config_hash={}  seed={}  runs={}",
            self.provenance.config_hash,
            self.provenance.seed,
            self.runs.len()
        );
        let alphas: Vec<f64> = self.aggregate.tpr.iter().map(|a| a.alpha).collect();
        let mut header = format!("{:<8}{:>22}", "run", "seed");
        for a in &alphas {
            header.push_str(&format!("{:>12}", format!("TPR@{a}")));
        }
        header.push_str(&format!("{:>10}{:>10}{:>10}", "eps_hat", "gdp_mu", "gdp_eps"));
        let _ = writeln!(s, "{header}");
        for r in &self.runs {
            let mut line = format!("{:<8}{:>22}", r.run, r.seed);
            for a in &alphas {
                let t = r.tpr.iter().find(|p| p.alpha == *a).map(|p| p.tpr).unwrap_or(f64::NAN);
                line.push_str(&format!("{t:>12.4}"));
            }
            line.push_str(&format!("{:>10.4}{:>10.4}{:>10.4}", r.eps_hat, r.gdp_mu, r.gdp_epsilon));
            let _ = writeln!(s, "{line}");
        }
        let agg = &self.aggregate;
        let rows: [(&str, fn(&Stats) -> f64); 3] = [("mean", |x| x.mean), ("std", |x| x.std), ("median", |x| x.median)];
        for (name, f) in rows {
            let mut line = format!("{:<8}{:>22}", name, "");
            for a in &agg.tpr {
                line.push_str(&format!("{:>12.4}", f(&a.stats)));
            }
            line.push_str(&format!(
                "{:>10.4}{:>10.4}{:>10.4}",
                f(&agg.eps_hat),
                f(&agg.gdp_mu),
                f(&agg.gdp_epsilon)
            ));
            let _ = writeln!(s, "{line}");
        }
        s
    }
}
