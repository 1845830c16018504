//! Monte-Carlo aggregation: per-step RMS position error per method and
//! empirical CDF samples at configured probes.

use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::run::RunLog;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MethodSeries {
    pub method: String,
    /// RMS position error per step; `None` where no run produced an estimate
    /// (e.g. a lagging fusion filter).
    pub rms_per_k: Vec<Option<f64>>,
    /// Number of runs contributing to each step.
    pub included_per_k: Vec<usize>,
    /// Mean of the defined per-step RMS values.
    pub time_averaged_rms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CdfSeries {
    pub method: String,
    pub coordinate: usize,
    pub k: usize,
    /// Sorted estimates of the coordinate across runs: the empirical CDF
    /// sample set.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub n_steps: usize,
    pub runs_requested: usize,
    pub runs_included: usize,
    pub excluded_runs: usize,
    pub exclusion_rate: f64,
    pub methods: Vec<MethodSeries>,
    pub cdf: Vec<CdfSeries>,
}

impl MetricReport {
    pub fn method(&self, name: &str) -> Option<&MethodSeries> {
        self.methods.iter().find(|m| m.method == name)
    }
}

fn position_error(est: &[f64], truth: &[f64], position_indices: &[usize]) -> f64 {
    position_indices
        .iter()
        .map(|&i| (est[i] - truth[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Estimate-per-step accessor for one method within one run.
fn estimate_at<'a>(log: &'a RunLog, method: &str, k: usize) -> Option<&'a [f64]> {
    let idx = k - 1;
    match method {
        "centralized" => log.centralized.get(idx).map(|v| v.as_slice()),
        "standalone" => log.standalone.get(idx).map(|v| v.as_slice()),
        "kalman" => log
            .kalman
            .as_ref()
            .and_then(|ks| ks.get(idx))
            .map(|v| v.as_slice()),
        "fused" => log
            .fused_mean
            .get(idx)
            .and_then(|o| o.as_deref()),
        _ => None,
    }
}

/// Aggregate run logs into RMS curves and CDF samples.
pub fn aggregate(
    cfg: &ScenarioConfig,
    logs: &[RunLog],
    runs_requested: usize,
    excluded_runs: usize,
) -> MetricReport {
    let n = cfg.n_steps;
    let mut method_names = vec!["centralized", "fused", "standalone"];
    if logs.iter().all(|l| l.kalman.is_some()) {
        method_names.push("kalman");
    }

    let methods = method_names
        .iter()
        .map(|&name| {
            let mut rms_per_k = Vec::with_capacity(n);
            let mut included_per_k = Vec::with_capacity(n);
            for k in 1..=n {
                let mut acc = 0.0;
                let mut count = 0usize;
                for log in logs {
                    if let Some(est) = estimate_at(log, name, k) {
                        let err =
                            position_error(est, &log.truth[k], &cfg.position_indices);
                        acc += err * err;
                        count += 1;
                    }
                }
                if count > 0 {
                    rms_per_k.push(Some((acc / count as f64).sqrt()));
                } else {
                    rms_per_k.push(None);
                }
                included_per_k.push(count);
            }
            let defined: Vec<f64> = rms_per_k.iter().flatten().copied().collect();
            let time_averaged_rms = if defined.is_empty() {
                f64::NAN
            } else {
                defined.iter().sum::<f64>() / defined.len() as f64
            };
            MethodSeries {
                method: name.to_string(),
                rms_per_k,
                included_per_k,
                time_averaged_rms,
            }
        })
        .collect();

    let mut cdf = Vec::new();
    for probe in &cfg.cdf_probes {
        for &name in &method_names {
            let mut values: Vec<f64> = logs
                .iter()
                .filter_map(|log| estimate_at(log, name, probe.k).map(|e| e[probe.coordinate]))
                .collect();
            values.sort_by(f64::total_cmp);
            cdf.push(CdfSeries {
                method: name.to_string(),
                coordinate: probe.coordinate,
                k: probe.k,
                values,
            });
        }
    }

    MetricReport {
        n_steps: n,
        runs_requested,
        runs_included: logs.len(),
        excluded_runs,
        exclusion_rate: excluded_runs as f64 / runs_requested as f64,
        methods,
        cdf,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::CdfProbe;

    fn tiny_log(truth_vals: &[f64], est_vals: &[f64]) -> RunLog {
        let n = truth_vals.len() - 1;
        RunLog {
            run_index: 0,
            n_steps: n,
            state_dim: 1,
            truth: truth_vals.iter().map(|&v| vec![v]).collect(),
            centralized: est_vals.iter().map(|&v| vec![v]).collect(),
            standalone: est_vals.iter().map(|&v| vec![v]).collect(),
            kalman: None,
            local_estimates: vec![vec![vec![0.0]]; n],
            fused_estimates: vec![vec![None]; n],
            fused_mean: est_vals.iter().map(|&v| Some(vec![v])).collect(),
            fused_se: vec![None; n],
            lag_per_tick: vec![1; n],
            burst_lags: vec![1],
            update_sizes: vec![1; n],
            consensus_final_disagreement: vec![0.0; n],
            snr_db: vec![],
            measurement_hash: "0".into(),
            divergences: vec![],
            proposal_fallbacks: 0,
        }
    }

    fn tiny_cfg(n: usize) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::linear_test();
        cfg.n_steps = n;
        cfg.position_indices = vec![0];
        cfg.cdf_probes = vec![CdfProbe { coordinate: 0, k: 1 }];
        cfg
    }

    #[test]
    fn perfect_estimates_give_zero_rms() {
        let cfg = tiny_cfg(3);
        let log = tiny_log(&[0.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        let report = aggregate(&cfg, &[log], 1, 0);
        let c = report.method("centralized").unwrap();
        assert!(c.rms_per_k.iter().all(|r| r == &Some(0.0)));
        assert_eq!(c.time_averaged_rms, 0.0);
        assert_eq!(report.exclusion_rate, 0.0);
    }

    #[test]
    fn single_run_rms_is_absolute_error() {
        let cfg = tiny_cfg(2);
        let log = tiny_log(&[0.0, 1.0, 2.0], &[1.5, 1.0]);
        let report = aggregate(&cfg, &[log], 1, 0);
        let c = report.method("centralized").unwrap();
        assert_eq!(c.rms_per_k[0], Some(0.5));
        assert_eq!(c.rms_per_k[1], Some(1.0));
    }

    #[test]
    fn cdf_values_are_sorted() {
        let cfg = tiny_cfg(2);
        let a = tiny_log(&[0.0, 1.0, 2.0], &[3.0, 1.0]);
        let b = tiny_log(&[0.0, 1.0, 2.0], &[-1.0, 1.0]);
        let report = aggregate(&cfg, &[a, b], 2, 0);
        let series = report
            .cdf
            .iter()
            .find(|c| c.method == "centralized")
            .unwrap();
        assert_eq!(series.values, vec![-1.0, 3.0]);
    }
}
