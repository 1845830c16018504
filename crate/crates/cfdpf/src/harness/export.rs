//! CSV and JSON export of run logs, metric reports, and bound curves.
//!
//! CSV numbers use Rust's shortest round-trip float formatting and `\n` line
//! endings, so identical inputs always produce byte-identical files. Column
//! orders are part of the format:
//!
//! - `estimates.csv`: `k`, truth coordinates, centralized, standalone, fused
//!   node-average (blank when the fusion filter has not reached `k`), lag.
//! - `metrics.csv`: `k,method,rms_position,n_runs`.
//! - `cdf.csv`: `method,coordinate,k,rank,value`.
//! - `bounds.csv`: `k,variant,position_bound`, then the information matrix
//!   entries row-major (`j_r_c`).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::metrics::MetricReport;
use crate::harness::run::RunLog;
use crate::pcrlb::BoundLog;

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn coord_header(prefix: &str, dim: usize, out: &mut String) {
    for i in 0..dim {
        out.push(',');
        out.push_str(prefix);
        out.push('_');
        out.push_str(&i.to_string());
    }
}

fn push_coords(values: Option<&[f64]>, dim: usize, out: &mut String) {
    match values {
        Some(v) => {
            for i in 0..dim {
                out.push(',');
                out.push_str(&v[i].to_string());
            }
        }
        None => {
            for _ in 0..dim {
                out.push(',');
            }
        }
    }
}

/// Render the per-step estimate table of one run.
pub fn runlog_to_csv(log: &RunLog) -> String {
    let dim = log.state_dim;
    let mut out = String::from("k");
    coord_header("truth", dim, &mut out);
    coord_header("centralized", dim, &mut out);
    coord_header("standalone", dim, &mut out);
    coord_header("fused", dim, &mut out);
    out.push_str(",lag\n");
    for k in 1..=log.n_steps {
        out.push_str(&k.to_string());
        push_coords(Some(&log.truth[k]), dim, &mut out);
        push_coords(log.centralized.get(k - 1).map(|v| v.as_slice()), dim, &mut out);
        push_coords(log.standalone.get(k - 1).map(|v| v.as_slice()), dim, &mut out);
        push_coords(log.fused_mean[k - 1].as_deref(), dim, &mut out);
        out.push(',');
        out.push_str(&log.lag_per_tick[k - 1].to_string());
        out.push('\n');
    }
    out
}

pub fn metrics_to_csv(report: &MetricReport) -> String {
    let mut out = String::from("k,method,rms_position,n_runs\n");
    for m in &report.methods {
        for k in 1..=report.n_steps {
            if let Some(rms) = m.rms_per_k[k - 1] {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    k,
                    m.method,
                    rms,
                    m.included_per_k[k - 1]
                ));
            }
        }
    }
    out
}

pub fn cdf_to_csv(report: &MetricReport) -> String {
    let mut out = String::from("method,coordinate,k,rank,value\n");
    for series in &report.cdf {
        for (rank, v) in series.values.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                series.method, series.coordinate, series.k, rank, v
            ));
        }
    }
    out
}

pub fn bounds_to_csv(bounds: &BoundLog) -> String {
    let dim = bounds.state_dim;
    let mut out = String::from("k,variant,position_bound");
    for r in 0..dim {
        for c in 0..dim {
            out.push_str(&format!(",j_{r}_{c}"));
        }
    }
    out.push('\n');
    for series in &bounds.series {
        for k in 1..=bounds.n_steps {
            out.push_str(&format!(
                "{},{},{}",
                k,
                series.variant.as_str(),
                series.position_bound[k - 1]
            ));
            for v in &series.fim[k - 1] {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
    }
    out
}

/// Write `runlog.json` and `estimates.csv` into `dir`.
pub fn export_run(log: &RunLog, dir: &Path) -> Result<()> {
    write_file(&dir.join("runlog.json"), &serde_json::to_string_pretty(log)?)?;
    write_file(&dir.join("estimates.csv"), &runlog_to_csv(log))
}

/// Write `report.json`, `metrics.csv`, and `cdf.csv` into `dir`.
pub fn export_report(report: &MetricReport, dir: &Path) -> Result<()> {
    write_file(
        &dir.join("report.json"),
        &serde_json::to_string_pretty(report)?,
    )?;
    write_file(&dir.join("metrics.csv"), &metrics_to_csv(report))?;
    write_file(&dir.join("cdf.csv"), &cdf_to_csv(report))
}

/// Write `bounds.json` and `bounds.csv` into `dir`.
pub fn export_bounds(bounds: &BoundLog, dir: &Path) -> Result<()> {
    write_file(
        &dir.join("bounds.json"),
        &serde_json::to_string_pretty(bounds)?,
    )?;
    write_file(&dir.join("bounds.csv"), &bounds_to_csv(bounds))
}

pub fn import_runlog(path: &Path) -> Result<RunLog> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn import_report(path: &Path) -> Result<MetricReport> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_row_log() -> RunLog {
        RunLog {
            run_index: 0,
            n_steps: 2,
            state_dim: 2,
            truth: vec![vec![0.0, 0.0], vec![1.0, 2.0], vec![2.0, 4.0]],
            centralized: vec![vec![1.25, 2.0], vec![2.0, 4.5]],
            standalone: vec![vec![0.5, 1.0], vec![1.0, 2.0]],
            kalman: None,
            local_estimates: vec![vec![vec![1.0, 2.0]], vec![vec![2.0, 4.0]]],
            fused_estimates: vec![vec![Some(vec![1.1, 2.1])], vec![None]],
            fused_mean: vec![Some(vec![1.1, 2.1]), None],
            fused_se: vec![Some(vec![0.1, 0.1]), None],
            lag_per_tick: vec![1, 2],
            burst_lags: vec![1, 2],
            update_sizes: vec![1],
            consensus_final_disagreement: vec![1e-9],
            snr_db: vec![],
            measurement_hash: "deadbeefdeadbeef".into(),
            divergences: vec![],
            proposal_fallbacks: 0,
        }
    }

    #[test]
    fn two_row_golden_csv() {
        // golden snapshot: blank fused cells where the filter lags
        let expected = "\
k,truth_0,truth_1,centralized_0,centralized_1,standalone_0,standalone_1,fused_0,fused_1,lag
1,1,2,1.25,2,0.5,1,1.1,2.1,1
2,2,4,2,4.5,1,2,,,2
";
        assert_eq!(runlog_to_csv(&two_row_log()), expected);
    }

    #[test]
    fn empty_log_is_header_only() {
        let mut log = two_row_log();
        log.n_steps = 0;
        log.truth = vec![vec![0.0, 0.0]];
        log.centralized.clear();
        log.standalone.clear();
        log.fused_mean.clear();
        log.lag_per_tick.clear();
        let csv = runlog_to_csv(&log);
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("k,truth_0"));
    }

    #[test]
    fn runlog_json_round_trip() {
        let log = two_row_log();
        let dir = tempfile::tempdir().unwrap();
        export_run(&log, dir.path()).unwrap();
        let back = import_runlog(&dir.path().join("runlog.json")).unwrap();
        assert_eq!(serde_json::to_string(&log).unwrap(), serde_json::to_string(&back).unwrap());
    }
}
