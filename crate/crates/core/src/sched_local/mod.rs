//! Engine-level batch formation.
//!
//! Every unfinished request on an instance is re-evaluated each iteration
//! ([`annotate`]) and a fresh [`BatchPlan`] is formed, either by
//! [`slide_batch`] or by one of the baseline policies in [`baseline`].

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gain::{token_deadline, GainError, GainWeights, Priority, SloSpec};
use crate::latmodel::{LatencyModelParams, Phase, WorkItem};

pub mod baseline;
mod slide;

pub use baseline::{baseline_batch, BaselineConfig, BaselinePolicy, VtcState};
pub use slide::{get_max_chunk, slide_batch, slide_order, PhiVariant, SlideConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedError {
    #[error("latency budget {t_budget} ms does not exceed batch overhead {t_c} ms")]
    Budget { t_budget: f64, t_c: f64 },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown local policy `{0}`")]
    UnknownPolicy(String),
    #[error(transparent)]
    Gain(#[from] GainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Urgency {
    Urgent,
    #[default]
    Normal,
}

/// Scheduler view of one unfinished request.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedRequest {
    pub id: u64,
    pub arrival_time: f64,
    pub priority: Priority,
    pub slo: SloSpec,
    pub input_len: u32,
    /// Prompt tokens already processed.
    pub prefill_done: u32,
    /// Output tokens emitted so far.
    pub output_len: u32,
    /// Tokens currently held in the KV cache (prompt progress included).
    pub kv_len: u32,
    /// KV blocks currently held by the request.
    pub held_blocks: u32,
    pub exec: f64,
    pub remain: f64,
    pub density: f64,
    pub state: Urgency,
}

impl SchedRequest {
    pub fn new(
        id: u64,
        arrival_time: f64,
        priority: Priority,
        slo: SloSpec,
        input_len: u32,
    ) -> Self {
        SchedRequest {
            id,
            arrival_time,
            priority,
            slo,
            input_len,
            prefill_done: 0,
            output_len: 0,
            kv_len: 0,
            held_blocks: 0,
            exec: 0.0,
            remain: 0.0,
            density: 0.0,
            state: Urgency::Normal,
        }
    }

    pub fn phase(&self) -> Phase {
        if self.prefill_done < self.input_len {
            Phase::Prefill
        } else {
            Phase::Decode
        }
    }

    pub fn remaining_prompt(&self) -> u32 {
        self.input_len - self.prefill_done
    }

    /// Work of a pass over `chunk` new tokens.
    pub fn work_item(&self, chunk: u32) -> WorkItem {
        match self.phase() {
            Phase::Prefill => WorkItem::prefill(chunk, self.kv_len),
            Phase::Decode => WorkItem::decode(self.kv_len),
        }
    }

    /// The next pass: the whole remaining prompt, or one decode step.
    pub fn next_pass(&self) -> WorkItem {
        match self.phase() {
            Phase::Prefill => self.work_item(self.remaining_prompt()),
            Phase::Decode => self.work_item(1),
        }
    }

    fn tie_cmp(&self, other: &Self) -> Ordering {
        self.arrival_time
            .total_cmp(&other.arrival_time)
            .then(self.id.cmp(&other.id))
    }
}

/// Recomputes `exec`, `remain` and `density` of every request and returns
/// the smallest `remain` (`+inf` for an empty queue).
pub fn annotate(
    queue: &mut [SchedRequest],
    params: &LatencyModelParams,
    weights: &GainWeights,
    now: f64,
) -> Result<f64, SchedError> {
    let mut t_min = f64::INFINITY;
    for r in queue.iter_mut() {
        let next_token = r.output_len + 1;
        r.exec = params.estimate_item(&r.next_pass());
        r.remain = r.arrival_time + token_deadline(&r.slo, next_token)? - now;
        r.density = weights.token_weight(r.priority, next_token)? / r.exec;
        t_min = t_min.min(r.remain);
    }
    Ok(t_min)
}

fn budget_factor(t_budget: f64, t_c: f64) -> Result<f64, SchedError> {
    if t_budget <= t_c {
        return Err(SchedError::Budget { t_budget, t_c });
    }
    Ok(t_budget / (t_budget - t_c))
}

/// Request-agnostic load judgment: every request is assumed to be served
/// last, after the whole queue, at `t_budget - t_c` of useful work per batch.
pub fn phi_aggressive(queue: &[SchedRequest], t_budget: f64, t_c: f64) -> Result<f64, SchedError> {
    let f = budget_factor(t_budget, t_c)?;
    Ok(f * queue.iter().map(|r| r.exec).sum::<f64>())
}

/// Request-specific load judgment: the work queued ahead of (and including)
/// `id` when the queue is served in ascending `remain` order.
pub fn phi_conservative(
    id: u64,
    queue: &[SchedRequest],
    t_budget: f64,
    t_c: f64,
) -> Result<f64, SchedError> {
    let f = budget_factor(t_budget, t_c)?;
    let order = edf_order(queue);
    let mut acc = 0.0;
    for &i in &order {
        acc += queue[i].exec;
        if queue[i].id == id {
            return Ok(f * acc);
        }
    }
    Err(SchedError::Contract(format!("request {id} is not in the queue")))
}

/// Prefill-only load judgment: one request per batch.
pub fn phi_prefill_only(queue: &[SchedRequest], t_c: f64) -> Result<f64, SchedError> {
    if let Some(r) = queue.iter().find(|r| r.phase() == Phase::Decode) {
        return Err(SchedError::Contract(format!(
            "prefill-only estimate given decode request {}",
            r.id
        )));
    }
    Ok(queue.iter().map(|r| r.exec).sum::<f64>() + queue.len() as f64 * t_c)
}

/// Indices sorted by ascending `remain`, ties by (arrival, id).
pub fn edf_order(queue: &[SchedRequest]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..queue.len()).collect();
    idx.sort_by(|&a, &b| {
        queue[a]
            .remain
            .total_cmp(&queue[b].remain)
            .then_with(|| queue[a].tie_cmp(&queue[b]))
    });
    idx
}

/// One admitted request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub id: u64,
    pub phase: Phase,
    pub chunk_len: u32,
    /// Estimated item time, excluding the batch overhead.
    pub est_time: f64,
    /// KV blocks newly reserved for this entry.
    pub new_blocks: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub entries: Vec<BatchEntry>,
    /// Estimated batch time including the overhead.
    pub est_time: f64,
    pub budget: f64,
    pub urgent: usize,
    pub normal: usize,
}

impl BatchPlan {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.id).collect()
    }
}

/// KV memory available to one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryBudget {
    pub free_blocks: u32,
    pub block_size: u32,
    /// Blocks that must stay free after admitting a request that holds none.
    pub watermark_blocks: u32,
    /// Cap on blocks newly reserved by one batch.
    pub max_new_blocks: Option<u32>,
}

impl MemoryBudget {
    pub fn unlimited() -> Self {
        MemoryBudget {
            free_blocks: u32::MAX,
            block_size: 16,
            watermark_blocks: 0,
            max_new_blocks: None,
        }
    }

    /// Blocks `r` must newly reserve to run its next pass. A prefill reserves
    /// its whole prompt on first admission so that a started prompt can
    /// always finish.
    pub fn blocks_needed(&self, r: &SchedRequest) -> u32 {
        let tokens = match r.phase() {
            Phase::Prefill => r.input_len,
            Phase::Decode => r.kv_len + 1,
        };
        tokens.div_ceil(self.block_size.max(1)).saturating_sub(r.held_blocks)
    }

    /// Whether `need` more blocks fit after `used` were taken by this batch.
    pub fn fits(&self, r: &SchedRequest, need: u32, used: u32) -> bool {
        if need == 0 {
            return true;
        }
        let cap = match self.max_new_blocks {
            Some(m) => m.min(self.free_blocks),
            None => self.free_blocks,
        };
        let reserve = if r.held_blocks == 0 {
            self.watermark_blocks
        } else {
            0
        };
        u64::from(used) + u64::from(need) + u64::from(reserve) <= u64::from(cap)
    }
}
