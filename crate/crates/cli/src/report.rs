//! Cross-seed aggregation of finished runs into comparison tables and plot
//! series.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::pipeline::{read_csv, write_csv, EvalRow, ExposureRow, ProbeCsvRow, ProgressRow};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub dataset: String,
    pub n_seeds: usize,
    pub mean_rouge_f: f64,
    pub std_rouge_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSeries {
    pub method: String,
    pub l: usize,
    pub n_seeds: usize,
    pub mean_exaccerr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProgressSeries {
    pub method: String,
    pub fraction: f64,
    pub n_seeds: usize,
    pub mean_exaccerr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeSummary {
    pub split: String,
    pub teacher: String,
    pub n_seeds: usize,
    pub kld_s_i: f64,
    pub kld_s_f: f64,
    pub rouge_greedy: f64,
    pub rouge_sampled: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub summary: Vec<SummaryRow>,
    pub exposure_steps: Vec<StepSeries>,
    pub exposure_progress: Vec<ProgressSeries>,
    pub probe: Vec<ProbeSummary>,
}

impl Report {
    pub fn rouge(&self, method: &str, dataset: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.method == method && r.dataset == dataset)
            .map(|r| r.mean_rouge_f)
    }

    pub fn exaccerr_at(&self, method: &str, l: usize) -> Option<f64> {
        self.exposure_steps
            .iter()
            .find(|r| r.method == method && r.l == l)
            .map(|r| r.mean_exaccerr)
    }

    pub fn probe_row(&self, split: &str, teacher: &str) -> Option<&ProbeSummary> {
        self.probe.iter().find(|r| r.split == split && r.teacher == teacher)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn csv_files(dir: &Path, sub: &str, suffix: &str) -> Result<Vec<(String, PathBuf)>> {
    let d = dir.join(sub);
    if !d.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(&d)? {
        let p = entry?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if let Some(stem) = name.strip_suffix(suffix) {
            out.push((stem.to_string(), p));
        }
    }
    out.sort();
    Ok(out)
}

/// Aggregates `runs` (one directory per seed, all sharing a config hash).
pub fn aggregate(runs: &[PathBuf]) -> Result<Report> {
    if runs.is_empty() {
        bail!("no runs to aggregate");
    }
    let mut hash: Option<String> = None;
    let mut rouge: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut steps: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    let mut progress: BTreeMap<(String, usize), (f64, Vec<f64>)> = BTreeMap::new();
    let mut probe: BTreeMap<(String, String), Vec<[f64; 4]>> = BTreeMap::new();
    for dir in runs {
        let m = RunManifest::load(dir)?.with_context(|| format!("{} has no manifest", dir.display()))?;
        match &hash {
            None => hash = Some(m.config_hash.clone()),
            Some(h) if *h != m.config_hash => bail!(
                "cannot aggregate {}: config hash {} differs from {}",
                dir.display(),
                m.config_hash,
                h
            ),
            _ => {}
        }
        for (_, p) in csv_files(dir, "eval", ".csv")? {
            for r in read_csv::<EvalRow>(&p)? {
                rouge.entry((r.method, r.dataset)).or_default().push(r.rouge_f);
            }
        }
        for (method, p) in csv_files(dir, "exposure", "_steps.csv")? {
            for r in read_csv::<ExposureRow>(&p)? {
                if let Some(v) = r.exaccerr {
                    steps.entry((method.clone(), r.l)).or_default().push(v);
                }
            }
        }
        for (method, p) in csv_files(dir, "exposure", "_progress.csv")? {
            for r in read_csv::<ProgressRow>(&p)? {
                if let Some(v) = r.exaccerr {
                    let e = progress.entry((method.clone(), r.step)).or_insert((r.fraction, Vec::new()));
                    e.1.push(v);
                }
            }
        }
        let pp = dir.join("probe.csv");
        if pp.exists() {
            for r in read_csv::<ProbeCsvRow>(&pp)? {
                probe
                    .entry((r.split, r.teacher))
                    .or_default()
                    .push([r.kld_s_i, r.kld_s_f, r.rouge_greedy, r.rouge_sampled]);
            }
        }
    }
    Ok(Report {
        summary: rouge
            .into_iter()
            .map(|((method, dataset), v)| SummaryRow {
                method,
                dataset,
                n_seeds: v.len(),
                mean_rouge_f: mean(&v),
                std_rouge_f: std(&v),
            })
            .collect(),
        exposure_steps: steps
            .into_iter()
            .map(|((method, l), v)| StepSeries {
                method,
                l,
                n_seeds: v.len(),
                mean_exaccerr: mean(&v),
            })
            .collect(),
        exposure_progress: progress
            .into_iter()
            .map(|((method, _), (fraction, v))| ProgressSeries {
                method,
                fraction,
                n_seeds: v.len(),
                mean_exaccerr: mean(&v),
            })
            .collect(),
        probe: probe
            .into_iter()
            .map(|((split, teacher), v)| {
                let col = |i: usize| mean(&v.iter().map(|r| r[i]).collect::<Vec<_>>());
                ProbeSummary {
                    split,
                    teacher,
                    n_seeds: v.len(),
                    kld_s_i: col(0),
                    kld_s_f: col(1),
                    rouge_greedy: col(2),
                    rouge_sampled: col(3),
                }
            })
            .collect(),
    })
}

/// Writes the report tables into `out` and returns the file names.
pub fn write_report(report: &Report, out: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(out)?;
    write_csv(&out.join("summary.csv"), &report.summary)?;
    write_csv(&out.join("exaccerr_vs_steps.csv"), &report.exposure_steps)?;
    write_csv(&out.join("exaccerr_vs_progress.csv"), &report.exposure_progress)?;
    write_csv(&out.join("probe.csv"), &report.probe)?;
    Ok(vec![
        "summary.csv".into(),
        "exaccerr_vs_steps.csv".into(),
        "exaccerr_vs_progress.csv".into(),
        "probe.csv".into(),
    ])
}
