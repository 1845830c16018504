//! Scenario orchestration: configuration, multi-rate scheduling, seeded runs,
//! Monte-Carlo batches, metrics, and export.

mod config;
mod export;
mod metrics;
mod run;
mod schedule;

pub use config::{
    BotScenario, CdfProbe, LinearScenario, PcrlbConfig, ScenarioConfig, ScenarioKind,
    UnicycleScenario,
};
pub use export::{
    bounds_to_csv, cdf_to_csv, export_bounds, export_report, export_run, import_report,
    import_runlog, metrics_to_csv, runlog_to_csv,
};
pub use metrics::{aggregate, CdfSeries, MethodSeries, MetricReport};
pub use run::{monte_carlo, pcrlb_bounds, run_one, run_scenario, DivergenceRecord, RunLog};
pub use schedule::{
    schedule_multirate, FusionMode, FusionUpdate, MultiRateSchedule, ScheduleTrace,
};
