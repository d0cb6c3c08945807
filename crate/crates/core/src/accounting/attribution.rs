// SPDX-License-Identifier: Apache-2.0

use super::{
    node_window_energy, task_window, total_of, AccountingError, AccountingOptions, AttributionPolicy,
    JoulesByDomain, NodeEnergyLog, PolicyKind, TaskEnergy, TaskNote, WallWindow,
};
use crate::trace::TaskRecord;

/// Outcome of splitting a node's energy among possibly concurrent tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub tasks: Vec<TaskEnergy>,
    /// Energy not charged to any task: idle stretches, the idle baseline,
    /// and shared segments under `ExclusiveOnly`.
    pub unattributed: JoulesByDomain,
    /// From the earliest task start to the latest task end.
    pub window: WallWindow,
}

impl Attribution {
    pub fn attributed_total(&self) -> f64 {
        self.tasks.iter().map(TaskEnergy::total_joules).sum()
    }

    pub fn unattributed_total(&self) -> f64 {
        total_of(&self.unattributed)
    }
}

/// Splits node energy among tasks segment by segment.
///
/// The timeline is cut at every task start and end. In each segment the
/// energy (less the idle baseline, if any) is shared among the active tasks
/// in proportion to their weight: the task's mean CPU rate for
/// `CpuTimeShare`, one for `WallTimeShare`. `ExclusiveOnly` charges only
/// segments with a single active task.
pub fn attribute_concurrent(
    tasks: &[TaskRecord],
    log: &NodeEnergyLog,
    policy: &AttributionPolicy,
    opts: &AccountingOptions,
) -> Result<Attribution, AccountingError> {
    policy.validate()?;
    if tasks.is_empty() {
        return Err(AccountingError::Invalid("no tasks to attribute".into()));
    }
    if let Some(t) = tasks.iter().find(|t| t.node_id != log.node_id) {
        return Err(AccountingError::WrongNode {
            task: t.task_id.clone(),
            task_node: t.node_id.clone(),
            log_node: log.node_id.clone(),
        });
    }
    let windows: Vec<WallWindow> = tasks.iter().map(|t| task_window(t, opts)).collect();
    let weights: Vec<f64> = tasks
        .iter()
        .map(|t| match policy.kind {
            PolicyKind::CpuTimeShare => t.cpu_rate(opts.sub_resolution_s),
            PolicyKind::WallTimeShare | PolicyKind::ExclusiveOnly => 1.0,
        })
        .collect();

    let mut cuts: Vec<i64> = windows
        .iter()
        .flat_map(|w| [w.start_wall_ns, w.end_wall_ns])
        .collect();
    cuts.sort_unstable();
    cuts.dedup();

    let mut out: Vec<TaskEnergy> = tasks
        .iter()
        .map(|t| {
            let mut te = TaskEnergy {
                task_id: t.task_id.clone(),
                joules_by_domain: log.series_by_domain.keys().map(|&d| (d, 0.0)).collect(),
                estimated: true,
                notes: Vec::new(),
            };
            if t.flags.sub_resolution {
                te.note(TaskNote::SubResolution);
            }
            if t.flags.cpu_time_fallback {
                te.note(TaskNote::CpuTimeFallback);
            }
            te
        })
        .collect();
    let mut unattributed: JoulesByDomain = log.series_by_domain.keys().map(|&d| (d, 0.0)).collect();

    for pair in cuts.windows(2) {
        let seg = WallWindow {
            start_wall_ns: pair[0],
            end_wall_ns: pair[1],
        };
        let energy = node_window_energy(log, &seg)?;
        let active: Vec<usize> = windows
            .iter()
            .enumerate()
            .filter(|(_, w)| w.start_wall_ns <= seg.start_wall_ns && w.end_wall_ns >= seg.end_wall_ns)
            .map(|(i, _)| i)
            .collect();
        if active.is_empty() {
            for (d, j) in &energy {
                *unattributed.get_mut(d).expect("same domains") += j;
            }
            continue;
        }
        let unsafe_gap = log.has_unsafe_gap_in(&seg);
        for &i in &active {
            if active.len() > 1 {
                out[i].note(TaskNote::SharedWindow);
            }
            if unsafe_gap {
                out[i].note(TaskNote::UnsafeGap);
            }
        }

        // idle baseline, split across domains by their share of the segment
        let seg_total = total_of(&energy);
        let mut attributable = energy.clone();
        if let Some(base_w) = policy.idle_baseline_watts {
            let base_j = base_w * seg.duration_s();
            if base_j >= seg_total {
                if base_j > seg_total {
                    for &i in &active {
                        out[i].note(TaskNote::BaselineClamped);
                    }
                }
                attributable.values_mut().for_each(|j| *j = 0.0);
            } else if seg_total > 0.0 {
                for j in attributable.values_mut() {
                    *j -= base_j * (*j / seg_total);
                }
            }
        }
        if policy.kind == PolicyKind::ExclusiveOnly && active.len() > 1 {
            attributable.values_mut().for_each(|j| *j = 0.0);
        }
        for (d, j) in &energy {
            *unattributed.get_mut(d).expect("same domains") += j - attributable[d];
        }

        let weight_sum: f64 = active.iter().map(|&i| weights[i]).sum();
        let equal = !(weight_sum > 0.0 && weight_sum.is_finite());
        if equal && active.len() > 1 {
            for &i in &active {
                out[i].note(TaskNote::ZeroWeight);
            }
        }
        for &i in &active {
            let share = if equal {
                1.0 / active.len() as f64
            } else {
                weights[i] / weight_sum
            };
            for (d, j) in &attributable {
                *out[i].joules_by_domain.get_mut(d).expect("same domains") += j * share;
            }
        }
    }

    Ok(Attribution {
        tasks: out,
        unattributed,
        window: WallWindow {
            start_wall_ns: cuts[0],
            end_wall_ns: *cuts.last().expect("non-empty"),
        },
    })
}
