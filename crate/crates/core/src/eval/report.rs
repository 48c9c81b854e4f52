//! Result files: per-round metrics CSV and a JSON summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::binio::write_atomic;
use crate::error::Result;
use crate::eval::config::ExperimentConfig;
use crate::eval::experiment::{MetricsReport, SeedResult};
use crate::eval::metrics::EvalMetrics;

pub const CSV_HEADER: &str =
    "round,method,seed,acc_all,acc_many,acc_medium,acc_few,teacher_acc_all,teacher_acc_few,wall_ms";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for seed in &report.seeds {
        for r in &seed.rounds {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.round,
                r.method,
                r.seed,
                cell(Some(r.student.overall)),
                cell(r.student.many),
                cell(r.student.medium),
                cell(r.student.few),
                cell(r.teacher.as_ref().map(|t| t.overall)),
                cell(r.teacher.as_ref().and_then(|t| t.few)),
                r.wall_ms
            );
        }
    }
    s
}

/// Mean and sample standard deviation over the seeds where a value exists.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedStat {
    pub mean: Option<f64>,
    /// `None` with fewer than two values.
    pub std: Option<f64>,
    pub n: usize,
}

impl SeedStat {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        let n = v.len();
        if n == 0 {
            return Self { mean: None, std: None, n };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Self { mean: Some(mean), std, n }
    }
}

fn metric_stats<'a>(ms: impl Iterator<Item = Option<&'a EvalMetrics>> + Clone) -> BTreeMap<&'static str, SeedStat> {
    let pick = |f: fn(&EvalMetrics) -> Option<f64>| SeedStat::of(ms.clone().map(|m| m.and_then(f)));
    BTreeMap::from([
        ("acc_all", pick(|m| Some(m.overall))),
        ("acc_many", pick(|m| m.many)),
        ("acc_medium", pick(|m| m.medium)),
        ("acc_few", pick(|m| m.few)),
    ])
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary<'a> {
    pub seed: u64,
    pub student: &'a EvalMetrics,
    pub teacher: Option<&'a EvalMetrics>,
    pub ablation_teachers: &'a BTreeMap<String, EvalMetrics>,
    pub train_class_counts: &'a [usize],
    pub empty_clients: &'a [usize],
    pub no_op_selections: usize,
    pub final_calibration_loss: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary<'a> {
    pub config: &'a ExperimentConfig,
    pub method: String,
    pub seeds: Vec<u64>,
    pub final_metrics: Vec<SeedSummary<'a>>,
    pub student_stats: BTreeMap<&'static str, SeedStat>,
    pub teacher_stats: Option<BTreeMap<&'static str, SeedStat>>,
    pub ablation_teacher_stats: BTreeMap<String, BTreeMap<&'static str, SeedStat>>,
}

pub fn summarize(report: &MetricsReport) -> Summary<'_> {
    let seeds: &[SeedResult] = &report.seeds;
    let teacher_stats = seeds
        .iter()
        .any(|s| s.final_teacher.is_some())
        .then(|| metric_stats(seeds.iter().map(|s| s.final_teacher.as_ref())));
    let mut ablation_teacher_stats = BTreeMap::new();
    for row in seeds.iter().flat_map(|s| s.ablation_teachers.keys()) {
        if !ablation_teacher_stats.contains_key(row) {
            let stats = metric_stats(seeds.iter().map(|s| s.ablation_teachers.get(row)));
            ablation_teacher_stats.insert(row.clone(), stats);
        }
    }
    Summary {
        config: &report.config,
        method: report.config.method.to_string(),
        seeds: seeds.iter().map(|s| s.seed).collect(),
        final_metrics: seeds
            .iter()
            .map(|s| SeedSummary {
                seed: s.seed,
                student: &s.final_student,
                teacher: s.final_teacher.as_ref(),
                ablation_teachers: &s.ablation_teachers,
                train_class_counts: &s.train_class_counts,
                empty_clients: &s.empty_clients,
                no_op_selections: s.no_op_selections,
                final_calibration_loss: s.final_calibration_loss,
            })
            .collect(),
        student_stats: metric_stats(seeds.iter().map(|s| Some(&s.final_student))),
        teacher_stats,
        ablation_teacher_stats,
    }
}

pub fn summary_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(&summarize(report)).expect("summary is serializable");
    s.push('\n');
    s
}

pub fn write_outputs(report: &MetricsReport, dir: &Path) -> Result<()> {
    write_atomic(&dir.join(METRICS_FILE), metrics_csv(report).as_bytes())?;
    write_atomic(&dir.join(SUMMARY_FILE), summary_json(report).as_bytes())
}
