//! Plain-text and JSON reports over one or more run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::injection_schedule::{
    aggregate_diffs, curvature_series, inflection_curve, mean_snr, moving_average, read_trace_file,
    schedule_from_json, DenoiseTrace, Fallback, ScheduleConfig,
};
use crate::pipeline::{read_manifest, RunMetrics};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("malformed artifact {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("no run directories given")]
    NoRuns,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScheduleBlock {
    pub s_obj: usize,
    pub s_rel: usize,
    pub s_attr: usize,
    pub total_steps: usize,
    pub windows: BTreeMap<char, [usize; 2]>,
    pub fallbacks: Vec<Fallback>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub dir: PathBuf,
    pub order: String,
    pub schedule: ScheduleBlock,
    /// Batch-mean attention change, element `i` is step `i + 1`.
    pub diff_series: Vec<f64>,
    /// Moving average of `diff_series`, element `j` is step `j + w`.
    pub diff_smoothed: Vec<f64>,
    pub snr_series: Vec<f64>,
    /// Curvature at steps `1..S-1`, element `i` is step `i + 1`.
    pub kappa_series: Vec<f64>,
    /// Step of maximum curvature before `s_attr`.
    pub kappa_argmax: Option<usize>,
    pub stage_mass: BTreeMap<String, BTreeMap<char, f64>>,
    pub latent_mse: f64,
    pub final_train_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub order: String,
    pub latent_mse: f64,
    pub final_train_loss: Option<f64>,
    pub late_mass: BTreeMap<char, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub runs: Vec<RunReport>,
    /// One row per run, keyed by injection order; only filled for two or more runs.
    pub ablation: Vec<AblationRow>,
}

fn read(path: &Path) -> Result<Vec<u8>, ReportError> {
    fs::read(path).map_err(|_| ReportError::MissingArtifact(path.to_path_buf()))
}

fn malformed(path: &Path, e: impl ToString) -> ReportError {
    ReportError::Malformed { path: path.to_path_buf(), message: e.to_string() }
}

fn calibration_traces(dir: &Path, files: &BTreeMap<String, String>) -> Result<Vec<DenoiseTrace>, ReportError> {
    files
        .keys()
        .filter(|k| k.starts_with("traces/calib_"))
        .map(|k| {
            let p = dir.join(k);
            if !p.exists() {
                return Err(ReportError::MissingArtifact(p));
            }
            read_trace_file(&p).map_err(|e| malformed(&p, e))
        })
        .collect()
}

fn kappa(snr: &[f64], cfg: &ScheduleConfig) -> Vec<f64> {
    let (x, y) = inflection_curve(snr, cfg.curvature_mode, cfg.g);
    curvature_series(&y, &x).unwrap_or_default()
}

/// Interior step with the largest curvature below `s_attr`, first on ties.
fn kappa_argmax(kappa: &[f64], s_attr: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, k) in kappa.iter().enumerate() {
        let t = i + 1;
        if t + 1 >= s_attr {
            break;
        }
        if best.is_none_or(|(_, b)| *k > b) {
            best = Some((t, *k));
        }
    }
    best.map(|(t, _)| t)
}

pub fn run_report(dir: &Path) -> Result<RunReport, ReportError> {
    let manifest_path = dir.join(crate::pipeline::MANIFEST);
    if !manifest_path.exists() {
        return Err(ReportError::MissingArtifact(manifest_path));
    }
    let manifest = read_manifest(dir).map_err(|e| malformed(&manifest_path, e))?;
    let sched_path = dir.join("schedule.json");
    let (schedule, cfg, fallbacks) = schedule_from_json(&read(&sched_path)?).map_err(|e| malformed(&sched_path, e))?;
    let metrics_path = dir.join("metrics.json");
    let metrics: RunMetrics = serde_json::from_slice(&read(&metrics_path)?).map_err(|e| malformed(&metrics_path, e))?;

    let traces = calibration_traces(dir, &manifest.files)?;
    let (diff_series, snr_series) = if traces.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let tp = dir.join("traces");
        (
            aggregate_diffs(&traces, cfg.theta).map_err(|e| malformed(&tp, e))?,
            mean_snr(&traces).map_err(|e| malformed(&tp, e))?,
        )
    };
    let kappa_series = kappa(&snr_series, &cfg);
    let w = |x: crate::injection_schedule::StepWindow| [x.0, x.1];
    Ok(RunReport {
        dir: dir.to_path_buf(),
        order: metrics.order,
        schedule: ScheduleBlock {
            s_obj: schedule.s_obj,
            s_rel: schedule.s_rel,
            s_attr: schedule.s_attr,
            total_steps: schedule.total_steps,
            windows: [('O', w(schedule.windows.obj)), ('R', w(schedule.windows.rel)), ('A', w(schedule.windows.attr))]
                .into_iter()
                .collect(),
            fallbacks,
        },
        diff_smoothed: moving_average(&diff_series, cfg.w),
        diff_series,
        snr_series,
        kappa_argmax: kappa_argmax(&kappa_series, schedule.s_attr),
        kappa_series,
        stage_mass: metrics.stage_mass,
        latent_mse: metrics.latent_mse,
        final_train_loss: metrics.final_train_loss,
    })
}

pub fn generate_report(dirs: &[PathBuf]) -> Result<Report, ReportError> {
    if dirs.is_empty() {
        return Err(ReportError::NoRuns);
    }
    let runs: Vec<RunReport> = dirs.iter().map(|d| run_report(d)).collect::<Result<_, _>>()?;
    let ablation = if runs.len() > 1 {
        runs.iter()
            .map(|r| AblationRow {
                order: r.order.clone(),
                latent_mse: r.latent_mse,
                final_train_loss: r.final_train_loss,
                late_mass: r.stage_mass.get("late").cloned().unwrap_or_default(),
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(Report { runs, ablation })
}

fn series(out: &mut String, name: &str, first_step: usize, values: &[f64]) {
    let _ = write!(out, "  {name} (from step {first_step}):");
    for v in values {
        let _ = write!(out, " {v:.4e}");
    }
    out.push('\n');
}

impl Report {
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.runs {
            let s = &r.schedule;
            let _ = writeln!(out, "run {} (order {})", r.dir.display(), r.order);
            let _ = writeln!(out, "schedule: s_obj={} s_rel={} s_attr={} of {} steps", s.s_obj, s.s_rel, s.s_attr, s.total_steps);
            let _ = writeln!(
                out,
                "  windows: O={:?} R={:?} A={:?}",
                s.windows[&'O'], s.windows[&'R'], s.windows[&'A']
            );
            if !s.fallbacks.is_empty() {
                let _ = writeln!(out, "  fallbacks: {:?}", s.fallbacks);
            }
            series(&mut out, "attention change", 1, &r.diff_series);
            series(&mut out, "smoothed change", s.total_steps.min(1 + r.diff_series.len() - r.diff_smoothed.len()), &r.diff_smoothed);
            series(&mut out, "mean snr", 0, &r.snr_series);
            series(&mut out, "curvature", 1, &r.kappa_series);
            match r.kappa_argmax {
                Some(t) => {
                    let _ = writeln!(out, "  curvature peak before s_attr: step {t}");
                }
                None => out.push_str("  curvature peak before s_attr: none\n"),
            }
            for (stage, mass) in &r.stage_mass {
                let _ = writeln!(
                    out,
                    "  attention mass ({stage}): O={:.4} R={:.4} A={:.4}",
                    mass.get(&'O').unwrap_or(&0.0),
                    mass.get(&'R').unwrap_or(&0.0),
                    mass.get(&'A').unwrap_or(&0.0)
                );
            }
            out.push('\n');
        }
        if !self.ablation.is_empty() {
            out.push_str("ablation\n");
            let _ = writeln!(out, "{:<6} {:>12} {:>12} {:>8} {:>8} {:>8}", "order", "latent_mse", "train_loss", "late_O", "late_R", "late_A");
            for row in &self.ablation {
                let m = |k: char| row.late_mass.get(&k).copied().unwrap_or(0.0);
                let loss = row.final_train_loss.map_or("-".to_string(), |l| format!("{l:.5}"));
                let _ = writeln!(
                    out,
                    "{:<6} {:>12.5} {:>12} {:>8.4} {:>8.4} {:>8.4}",
                    row.order,
                    row.latent_mse,
                    loss,
                    m('O'),
                    m('R'),
                    m('A')
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{run_pipeline, PipelineConfig, SimSection, TrainSection};

    fn run(dir: &Path, order: &str) {
        let cfg = PipelineConfig {
            caption: Some("a cat on a chair beside a small table".into()),
            out_dir: dir.to_path_buf(),
            order: order.into(),
            train: TrainSection { steps: 2, dataset_size: 2, ..Default::default() },
            sim: SimSection { calibration_runs: 2, ..Default::default() },
            ..Default::default()
        };
        run_pipeline(&cfg).unwrap();
    }

    #[test]
    fn single_and_paired_runs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run(a.path(), "ORA");
        run(b.path(), "ARO");
        let one = generate_report(&[a.path().to_path_buf()]).unwrap();
        assert_eq!(one.runs.len(), 1);
        assert_eq!(one.runs[0].schedule.s_obj, 0);
        assert_eq!(one.runs[0].kappa_argmax, Some(one.runs[0].schedule.s_rel));
        assert!(one.ablation.is_empty());
        assert_eq!(one.to_text().matches("schedule:").count(), 1);

        let two = generate_report(&[a.path().to_path_buf(), b.path().to_path_buf()]).unwrap();
        let orders: Vec<&str> = two.ablation.iter().map(|r| r.order.as_str()).collect();
        assert_eq!(orders, vec!["ORA", "ARO"]);
        assert!(two.to_text().contains("ablation"));
    }

    #[test]
    fn missing_manifest_is_reported() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(generate_report(&[d.path().to_path_buf()]), Err(ReportError::MissingArtifact(_))));
        assert!(matches!(generate_report(&[]), Err(ReportError::NoRuns)));
    }

    #[test]
    fn argmax_respects_attr_bound() {
        // kappa[i] is step i + 1.
        assert_eq!(kappa_argmax(&[0.1, 0.5, 0.2, 0.9], 4), Some(2));
        assert_eq!(kappa_argmax(&[0.1, 0.5, 0.2, 0.9], 6), Some(4));
        assert_eq!(kappa_argmax(&[0.3, 0.3], 5), Some(1));
        assert_eq!(kappa_argmax(&[0.3], 2), None);
    }
}
