//! Per-run detection results and their aggregation into tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{bail, Context};
use doe_core::detection::{DetectionReport, Scorer};
use serde::{Deserialize, Serialize};

/// Detection results of one model on every test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub seed: u64,
    pub scorer: Scorer,
    pub id_accuracy: f64,
    pub splits: Vec<SplitReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: String,
    pub report: DetectionReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub test_split: String,
    pub seed: u64,
    pub fpr95: f64,
    pub auroc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub variant: String,
    pub test_split: String,
    pub seeds: usize,
    pub fpr95_mean: f64,
    pub fpr95_std: f64,
    pub auroc_mean: f64,
    pub auroc_std: f64,
}

type RowKey = (String, String, u64);

/// Rows keyed by (variant, split, seed); each key appears at most once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportTable {
    rows: BTreeMap<RowKey, ReportRow>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ReportTable {
    /// Adds a row; an identical repeat is ignored, a conflicting one is an
    /// error.
    pub fn insert(&mut self, row: ReportRow) -> anyhow::Result<()> {
        let key = (row.variant.clone(), row.test_split.clone(), row.seed);
        match self.rows.get(&key) {
            Some(old) if *old != row => bail!(
                "conflicting rows for variant `{}`, split `{}`, seed {}",
                row.variant,
                row.test_split,
                row.seed
            ),
            Some(_) => Ok(()),
            None => {
                self.rows.insert(key, row);
                Ok(())
            }
        }
    }

    pub fn add_run(&mut self, run: &RunReport) -> anyhow::Result<()> {
        for s in &run.splits {
            self.insert(ReportRow {
                variant: run.variant.clone(),
                test_split: s.split.clone(),
                seed: run.seed,
                fpr95: s.report.fpr95,
                auroc: s.report.auroc,
            })?;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.values()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,test_split,seed,fpr95,auroc\n");
        for r in self.rows() {
            writeln!(out, "{},{},{},{},{}", r.variant, r.test_split, r.seed, r.fpr95, r.auroc).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> anyhow::Result<Self> {
        let mut table = Self::default();
        let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        for (i, rec) in rdr.deserialize::<ReportRow>().enumerate() {
            table.insert(rec.with_context(|| format!("row {}", i + 2))?)?;
        }
        Ok(table)
    }

    /// Mean and sample standard deviation over seeds per (variant, split).
    pub fn aggregate(&self) -> Vec<Aggregate> {
        let mut groups: BTreeMap<(&str, &str), Vec<&ReportRow>> = BTreeMap::new();
        for r in self.rows() {
            groups.entry((&r.variant, &r.test_split)).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|((variant, split), rows)| {
                let (fpr95_mean, fpr95_std) = mean_std(&rows.iter().map(|r| r.fpr95).collect::<Vec<_>>());
                let (auroc_mean, auroc_std) = mean_std(&rows.iter().map(|r| r.auroc).collect::<Vec<_>>());
                Aggregate {
                    variant: variant.to_string(),
                    test_split: split.to_string(),
                    seeds: rows.len(),
                    fpr95_mean,
                    fpr95_std,
                    auroc_mean,
                    auroc_std,
                }
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("variant,test_split,seeds,fpr95_mean,fpr95_std,auroc_mean,auroc_std\n");
        for a in self.aggregate() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                a.variant, a.test_split, a.seeds, a.fpr95_mean, a.fpr95_std, a.auroc_mean, a.auroc_std
            )
            .unwrap();
        }
        out
    }

    /// One table per test split, percentages with mean ± std; the lowest
    /// FPR95 and highest AUROC means are bold.
    pub fn to_markdown(&self) -> String {
        let agg = self.aggregate();
        let mut splits: Vec<&str> = agg.iter().map(|a| a.test_split.as_str()).collect();
        splits.sort_unstable();
        splits.dedup();
        let mut out = String::new();
        for split in splits {
            let rows: Vec<&Aggregate> = agg.iter().filter(|a| a.test_split == split).collect();
            let best_fpr = rows.iter().map(|a| a.fpr95_mean).fold(f64::INFINITY, f64::min);
            let best_auroc = rows.iter().map(|a| a.auroc_mean).fold(f64::NEG_INFINITY, f64::max);
            let cell = |mean: f64, std: f64, best: bool| {
                let s = format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * std);
                if best {
                    format!("**{s}**")
                } else {
                    s
                }
            };
            writeln!(out, "## {split}\n").unwrap();
            out.push_str("| variant | FPR95 (%) | AUROC (%) | seeds |\n|---|---|---|---|\n");
            for a in rows {
                writeln!(
                    out,
                    "| {} | {} | {} | {} |",
                    a.variant,
                    cell(a.fpr95_mean, a.fpr95_std, a.fpr95_mean == best_fpr),
                    cell(a.auroc_mean, a.auroc_std, a.auroc_mean == best_auroc),
                    a.seeds
                )
                .unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// `seed,bin_left,bin_right,id_count,ood_count` for every run of one
/// (variant, split).
pub fn histogram_csv(runs: &[&RunReport], split: &str) -> String {
    let mut out = String::from("seed,bin_left,bin_right,id_count,ood_count\n");
    for run in runs {
        for s in run.splits.iter().filter(|s| s.split == split) {
            for b in &s.report.histogram {
                writeln!(out, "{},{},{},{},{}", run.seed, b.left, b.right, b.id_count, b.ood_count).unwrap();
            }
        }
    }
    out
}
