//! Multi-rate scheduling of the fusion filters against the local filters.
//!
//! Local filters tick once per observation interval. A fusion update costs
//! `consensus_budget` consensus iterations, and the network delivers
//! `iterations_per_interval[t]` iterations during tick `t` (cycled), so the
//! effective fusion cycle is `T_c = budget / available` intervals. When the
//! fusion filter falls behind it snapshots its backlog and plans a catch-up
//! burst:
//!
//! - the conventional filter can only fuse one step per update, so a backlog
//!   of `m` costs `m` full updates; under `T_c = 2 dt` the backlog snapshot
//!   doubles burst over burst (1, 2, 4, 8, ...),
//! - the modified filter fuses `min(backlog, max_lag)` steps in a single
//!   update, so the same schedule settles at a constant backlog.
//!
//! An update started during tick `t` becomes visible at the start of the
//! tick after its budget is filled; completions after the last observation
//! are still drained (no new bursts are planned there).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// One local step fused per update.
    Conventional,
    /// Up to `max_lag` buffered local steps fused per update.
    Modified,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct MultiRateSchedule {
    /// Consensus iterations one fusion update consumes.
    pub consensus_budget: usize,
    /// Consensus iterations the network delivers per observation interval;
    /// cycled over the run, so a single entry models a constant rate.
    pub iterations_per_interval: Vec<usize>,
    /// Cap on the number of steps fused by one modified update.
    pub max_lag: usize,
    pub mode: FusionMode,
}

impl MultiRateSchedule {
    /// Consensus fully converges within every observation interval.
    pub fn converged_each_step(budget: usize) -> Self {
        MultiRateSchedule {
            consensus_budget: budget,
            iterations_per_interval: vec![budget],
            max_lag: 1,
            mode: FusionMode::Conventional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.consensus_budget == 0 {
            return Err(Error::Config("consensus_budget must be >= 1".into()));
        }
        if self.max_lag == 0 {
            return Err(Error::Config("max_lag must be >= 1".into()));
        }
        if self.iterations_per_interval.is_empty()
            || self.iterations_per_interval.iter().all(|&c| c == 0)
        {
            return Err(Error::Config(
                "iterations_per_interval needs at least one positive entry".into(),
            ));
        }
        Ok(())
    }
}

/// One planned fusion update covering local steps `(from_k, from_k + m]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionUpdate {
    pub start_tick: usize,
    /// Tick at whose start the fused estimate becomes available.
    pub complete_tick: usize,
    pub from_k: usize,
    pub m: usize,
}

/// Full schedule trace for a run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ScheduleTrace {
    /// Completed updates in completion order.
    pub updates: Vec<FusionUpdate>,
    /// Staleness `k - fusion_clock` after each tick `k = 1..=n_steps`.
    pub lag_per_tick: Vec<usize>,
    /// Backlog snapshots taken each time a catch-up burst is planned.
    pub burst_lags: Vec<usize>,
}

impl ScheduleTrace {
    pub fn max_update_size(&self) -> usize {
        self.updates.iter().map(|u| u.m).max().unwrap_or(0)
    }

    pub fn max_lag_per_tick(&self) -> usize {
        self.lag_per_tick.iter().copied().max().unwrap_or(0)
    }
}

/// Plan the fusion actions for a run of `n_steps` local ticks.
pub fn schedule_multirate(schedule: &MultiRateSchedule, n_steps: usize) -> ScheduleTrace {
    let cycle = &schedule.iterations_per_interval;
    let budget = schedule.consensus_budget;

    let mut updates = Vec::new();
    let mut lag_per_tick = Vec::with_capacity(n_steps);
    let mut burst_lags = Vec::new();

    let mut fusion_clock = 0usize; // last step whose fused estimate is visible
    let mut committed = 0usize; // fusion_clock plus everything in flight
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut active: Option<(usize, usize, usize)> = None; // (m, start_tick, work_left)
    let mut finished: Vec<(usize, usize)> = Vec::new(); // (m, start_tick) awaiting visibility

    // hard stop: enough ticks to drain every possible queued update
    let cycle_sum: usize = cycle.iter().sum();
    let max_ticks = n_steps
        + 2 * cycle.len()
        + (n_steps * budget).div_ceil(cycle_sum.max(1)) * cycle.len()
        + 4;

    let mut k = 0usize;
    loop {
        k += 1;
        // completions whose budget filled on earlier ticks become visible now
        for (m, start_tick) in finished.drain(..) {
            updates.push(FusionUpdate {
                start_tick,
                complete_tick: k,
                from_k: fusion_clock,
                m,
            });
            fusion_clock += m;
        }
        let local_clock = k.min(n_steps);
        let mut credit = cycle[(k - 1) % cycle.len()];
        while credit > 0 {
            if active.is_none() {
                if queue.is_empty() {
                    if k > n_steps {
                        break; // drain only, no new bursts
                    }
                    let backlog = local_clock - committed;
                    if backlog == 0 {
                        break;
                    }
                    burst_lags.push(backlog);
                    match schedule.mode {
                        FusionMode::Conventional => {
                            for _ in 0..backlog {
                                queue.push_back(1);
                            }
                        }
                        FusionMode::Modified => {
                            queue.push_back(backlog.min(schedule.max_lag));
                        }
                    }
                }
                let m = queue.pop_front().expect("queue refilled above");
                committed += m;
                active = Some((m, k, budget));
            }
            let (m, start_tick, mut work) = active.take().expect("set above");
            let spend = credit.min(work);
            work -= spend;
            credit -= spend;
            if work == 0 {
                finished.push((m, start_tick));
            } else {
                active = Some((m, start_tick, work));
            }
        }
        if k <= n_steps {
            lag_per_tick.push(k - fusion_clock);
        }
        let drained = active.is_none() && queue.is_empty() && finished.is_empty();
        if (k >= n_steps && drained) || k >= max_ticks {
            break;
        }
    }

    ScheduleTrace {
        updates,
        lag_per_tick,
        burst_lags,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_interval_schedule(mode: FusionMode, max_lag: usize) -> MultiRateSchedule {
        // budget 10 against 5 iterations per tick: one update spans two ticks
        MultiRateSchedule {
            consensus_budget: 10,
            iterations_per_interval: vec![5],
            max_lag,
            mode,
        }
    }

    #[test]
    fn converged_schedule_fuses_every_step_with_unit_lag() {
        let s = MultiRateSchedule::converged_each_step(40);
        let trace = schedule_multirate(&s, 12);
        assert_eq!(trace.updates.len(), 12);
        assert!(trace.updates.iter().all(|u| u.m == 1));
        assert!(trace.lag_per_tick.iter().all(|&l| l == 1));
        assert!(trace.burst_lags.iter().all(|&b| b == 1));
        // consecutive coverage of every step
        for (i, u) in trace.updates.iter().enumerate() {
            assert_eq!(u.from_k, i);
        }
    }

    #[test]
    fn conventional_backlog_doubles_when_updates_span_two_ticks() {
        let s = two_interval_schedule(FusionMode::Conventional, 1);
        let trace = schedule_multirate(&s, 20);
        assert_eq!(&trace.burst_lags[..4], &[1, 2, 4, 8]);
        // staleness grows without bound within the run
        assert!(trace.max_lag_per_tick() > 8, "max lag {}", trace.max_lag_per_tick());
        assert!(trace.updates.iter().all(|u| u.m == 1));
    }

    #[test]
    fn modified_backlog_settles_at_the_cap() {
        let s = two_interval_schedule(FusionMode::Modified, 2);
        let trace = schedule_multirate(&s, 20);
        assert_eq!(trace.burst_lags[0], 1);
        assert!(trace.burst_lags[1..].iter().all(|&b| b == 2));
        assert_eq!(trace.max_update_size(), 2);
        // hand trace: after the first unit update the filter fuses pairs
        let sizes: Vec<usize> = trace.updates.iter().map(|u| u.m).collect();
        assert_eq!(&sizes[..4], &[1, 2, 2, 2]);
        // contiguous coverage
        let mut clock = 0;
        for u in &trace.updates {
            assert_eq!(u.from_k, clock);
            clock += u.m;
        }
    }

    #[test]
    fn variable_connectivity_catches_up() {
        // dips to zero iterations, then bursts of capacity
        let s = MultiRateSchedule {
            consensus_budget: 10,
            iterations_per_interval: vec![10, 0, 0, 30],
            max_lag: 4,
            mode: FusionMode::Modified,
        };
        let trace = schedule_multirate(&s, 24);
        assert!(trace.max_update_size() <= 4);
        // after each capacity burst the backlog returns to a bounded band
        assert!(trace.lag_per_tick.iter().max().unwrap() <= &4);
    }

    #[test]
    fn schedule_is_deterministic_and_pure() {
        let s = two_interval_schedule(FusionMode::Modified, 2);
        assert_eq!(schedule_multirate(&s, 20), schedule_multirate(&s, 20));
    }
}
