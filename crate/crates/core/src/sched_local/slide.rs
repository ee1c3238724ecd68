//! SlideBatching: latency-budgeted batch formation with a sliding
//! URGENT/NORMAL partition.
//!
//! The budget is the smallest remaining time to deadline in the queue,
//! floored at `eta`. A request is URGENT when its remaining time is below
//! `gamma` times a load estimate of when it would be served; URGENT requests
//! are admitted first in descending gain density, NORMAL ones after them in
//! ascending remaining time.

use serde::{Deserialize, Serialize};

use super::{
    annotate, edf_order, phi_aggressive, phi_prefill_only, BatchEntry, BatchPlan, MemoryBudget,
    SchedError, SchedRequest, Urgency,
};
use crate::gain::GainWeights;
use crate::latmodel::{LatencyModelParams, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiVariant {
    #[default]
    Aggressive,
    Conservative,
    PrefillOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlideConfig {
    /// Budget floor in ms. `None` uses the smallest TPOT target in the
    /// queue, clamped to at least 5 ms.
    pub eta: Option<f64>,
    pub gamma: f64,
    pub phi_variant: PhiVariant,
    pub min_chunk: u32,
    /// Cap on KV blocks newly reserved per batch.
    pub max_batch_memory: Option<u32>,
    /// Grant the first admitted entry at least `min_chunk` tokens even when
    /// it exceeds the budget.
    pub first_entry_guarantee: bool,
}

impl Default for SlideConfig {
    fn default() -> Self {
        SlideConfig {
            eta: None,
            gamma: 1.0,
            phi_variant: PhiVariant::Aggressive,
            min_chunk: 16,
            max_batch_memory: None,
            first_entry_guarantee: true,
        }
    }
}

pub const ETA_FLOOR_MS: f64 = 5.0;

impl SlideConfig {
    pub fn validate(&self) -> Result<(), String> {
        if let Some(eta) = self.eta {
            if !(eta > 0.0) {
                return Err(format!("eta must be > 0, got {eta}"));
            }
        }
        if !(self.gamma >= 0.0) {
            return Err(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if self.min_chunk < 1 {
            return Err("min_chunk must be >= 1".into());
        }
        Ok(())
    }

    pub fn eta_for(&self, queue: &[SchedRequest]) -> f64 {
        self.eta.unwrap_or_else(|| {
            let tpot = queue
                .iter()
                .map(|r| r.slo.tpot_slo)
                .filter(|t| *t > 0.0)
                .fold(f64::INFINITY, f64::min);
            if tpot.is_finite() {
                tpot.max(ETA_FLOOR_MS)
            } else {
                ETA_FLOOR_MS
            }
        })
    }
}

/// Largest chunk of `req`'s next pass whose estimate fits `remaining`.
///
/// Prefill chunks are multiples of `min_chunk` or the whole remaining
/// prompt. With `first` set the request is granted at least one minimal
/// chunk regardless of the budget. Returns `(0, 0.0)` when nothing fits.
pub fn get_max_chunk(
    req: &SchedRequest,
    remaining: f64,
    params: &LatencyModelParams,
    min_chunk: u32,
    first: bool,
) -> (u32, f64) {
    let cost = |c: u32| params.estimate_item(&req.work_item(c));
    match req.phase() {
        Phase::Decode => {
            let t = cost(1);
            if t <= remaining || first {
                (1, t)
            } else {
                (0, 0.0)
            }
        }
        Phase::Prefill => {
            let rest = req.remaining_prompt();
            let full = cost(rest);
            if full <= remaining {
                return (rest, full);
            }
            let m = min_chunk.max(1);
            // largest k with k*m < rest and cost(k*m) <= remaining
            let (mut lo, mut hi) = (0u32, (rest - 1) / m);
            while lo < hi {
                let mid = lo + (hi - lo).div_ceil(2);
                if cost(mid * m) <= remaining {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            if lo > 0 {
                (lo * m, cost(lo * m))
            } else if first {
                let c = m.min(rest);
                (c, cost(c))
            } else {
                (0, 0.0)
            }
        }
    }
}

fn urgency_thresholds(
    queue: &[SchedRequest],
    cfg: &SlideConfig,
    t_budget: f64,
    t_c: f64,
) -> Result<Vec<f64>, SchedError> {
    let n = queue.len();
    // A budget at or below the overhead leaves no useful capacity: every
    // request is treated as unservable in time.
    let phis: Vec<f64> = match cfg.phi_variant {
        PhiVariant::PrefillOnly => vec![phi_prefill_only(queue, t_c)?; n],
        PhiVariant::Aggressive => {
            let phi = match phi_aggressive(queue, t_budget, t_c) {
                Ok(v) => v,
                Err(SchedError::Budget { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            vec![phi; n]
        }
        PhiVariant::Conservative => {
            let factor = if t_budget > t_c {
                t_budget / (t_budget - t_c)
            } else {
                f64::INFINITY
            };
            let mut out = vec![0.0; n];
            let mut acc = 0.0;
            for i in edf_order(queue) {
                acc += queue[i].exec;
                out[i] = factor * acc;
            }
            out
        }
    };
    Ok(phis
        .into_iter()
        .map(|phi| if cfg.gamma == 0.0 { 0.0 } else { cfg.gamma * phi })
        .collect())
}

/// Classifies an annotated queue and returns admission order as indices.
pub fn slide_order(
    queue: &mut [SchedRequest],
    t_min: f64,
    params: &LatencyModelParams,
    cfg: &SlideConfig,
) -> Result<(Vec<usize>, f64), SchedError> {
    let t_budget = t_min.max(cfg.eta_for(queue));
    let thresholds = urgency_thresholds(queue, cfg, t_budget, params.overhead())?;
    for (r, th) in queue.iter_mut().zip(&thresholds) {
        r.state = if r.remain < *th {
            Urgency::Urgent
        } else {
            Urgency::Normal
        };
    }
    let mut order: Vec<usize> = (0..queue.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&queue[a], &queue[b]);
        match (ra.state, rb.state) {
            (Urgency::Urgent, Urgency::Normal) => std::cmp::Ordering::Less,
            (Urgency::Normal, Urgency::Urgent) => std::cmp::Ordering::Greater,
            (Urgency::Urgent, Urgency::Urgent) => rb.density.total_cmp(&ra.density),
            (Urgency::Normal, Urgency::Normal) => ra.remain.total_cmp(&rb.remain),
        }
        .then_with(|| ra.tie_cmp(rb))
    });
    Ok((order, t_budget))
}

/// Forms one batch. `queue` is annotated in place.
pub fn slide_batch(
    queue: &mut [SchedRequest],
    params: &LatencyModelParams,
    weights: &GainWeights,
    cfg: &SlideConfig,
    now: f64,
    mem: &MemoryBudget,
) -> Result<BatchPlan, SchedError> {
    let t_min = annotate(queue, params, weights, now)?;
    let (order, t_budget) = slide_order(queue, t_min, params, cfg)?;
    let urgent = queue.iter().filter(|r| r.state == Urgency::Urgent).count();
    let mem = MemoryBudget {
        max_new_blocks: cfg.max_batch_memory.or(mem.max_new_blocks),
        ..*mem
    };

    let mut t_batch = params.overhead();
    let mut entries: Vec<BatchEntry> = Vec::new();
    let mut used_blocks = 0u32;
    for i in order {
        let first = entries.is_empty() && cfg.first_entry_guarantee;
        if t_batch >= t_budget && !first {
            break;
        }
        let r = &queue[i];
        let need = mem.blocks_needed(r);
        if !mem.fits(r, need, used_blocks) {
            continue;
        }
        let (chunk, t) = get_max_chunk(r, (t_budget - t_batch).max(0.0), params, cfg.min_chunk, first);
        if chunk == 0 {
            continue;
        }
        used_blocks += need;
        t_batch += t;
        entries.push(BatchEntry {
            id: r.id,
            phase: r.phase(),
            chunk_len: chunk,
            est_time: t,
            new_blocks: need,
        });
    }
    Ok(BatchPlan {
        entries,
        est_time: t_batch,
        budget: t_budget,
        urgent,
        normal: queue.len() - urgent,
    })
}
