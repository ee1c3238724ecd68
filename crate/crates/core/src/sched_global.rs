//! Service-level request routing.
//!
//! The router mirrors the prefill queue of each instance (plus a decode
//! counter for co-located instances and free KV blocks for decode
//! instances) and uses it to predict, per instance, how much first-token
//! gain admitting a new request would add. GoRouting keeps the instances
//! whose gain increase is close to the best one and then picks among them
//! with two load thresholds, so lighter instances stay free for future
//! long or urgent requests instead of being filled by strict balancing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latmodel::LatencyModelParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RouteError {
    #[error("instance pool `{0}` is empty")]
    EmptyPool(&'static str),
    #[error("unknown instance {0}")]
    UnknownInstance(usize),
    #[error("instance {inst}: {msg}")]
    Consistency { inst: usize, msg: String },
    #[error("invalid route config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceKind {
    Prefill,
    Decode,
    Colocated,
}

/// What the router knows about a queued prefill.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueueSummary {
    pub id: u64,
    /// Predicted prefill time of the whole prompt.
    pub exec: f64,
    /// Absolute first-token deadline.
    pub ttft_deadline: f64,
    pub ttft_slo: f64,
    pub tpot_slo: f64,
    /// First-token gain `w_first * w_priority`.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceState {
    pub instance_id: usize,
    pub kind: InstanceKind,
    pub prefill_queue: Vec<QueueSummary>,
    pub n_d: u32,
    pub free_blocks: u32,
    /// Time of the last prefill queue mutation.
    pub ts_p: f64,
}

impl InstanceState {
    pub fn new(instance_id: usize, kind: InstanceKind, free_blocks: u32) -> Self {
        InstanceState {
            instance_id,
            kind,
            prefill_queue: Vec::new(),
            n_d: 0,
            free_blocks,
            ts_p: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteConfig {
    pub alpha: f64,
    pub mu: f64,
    pub lambda: f64,
    /// Mean decode step time for co-located load estimates; `None` derives it
    /// from the latency model and the mean prompt length seen so far.
    pub b_d_avg: Option<f64>,
    /// Floor of the co-located latency budget estimate (ms).
    pub budget_floor: f64,
}

impl Default for RouteConfig {
    fn default() -> Self {
        RouteConfig {
            alpha: 0.9,
            mu: 0.2,
            lambda: 0.8,
            b_d_avg: None,
            budget_floor: 5.0,
        }
    }
}

impl RouteConfig {
    pub fn validate(&self) -> Result<(), RouteError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(RouteError::Config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if !(self.mu > 0.0 && self.mu < self.lambda) {
            return Err(RouteError::Config(format!(
                "need 0 < mu < lambda, got mu={} lambda={}",
                self.mu, self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub prefill_instance: usize,
    pub decode_instance: usize,
    /// Largest gain increase over the prefill pool.
    pub delta_gain: f64,
    pub fallback_used: bool,
    /// `(instance, delta)` for every prefill candidate, in pool order.
    pub deltas: Vec<(usize, f64)>,
}

/// Load model shared by the estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadModel {
    /// Per-batch overhead (ms).
    pub t_c: f64,
    /// Mean decode step time (ms), co-located only.
    pub b_d_avg: f64,
    pub budget_floor: f64,
}

impl LoadModel {
    pub fn new(params: &LatencyModelParams, b_d_avg: f64, budget_floor: f64) -> Self {
        LoadModel {
            t_c: params.overhead(),
            b_d_avg,
            budget_floor,
        }
    }
}

fn lag(inst: &InstanceState, now: f64) -> f64 {
    (now - inst.ts_p).max(0.0)
}

/// Predicted time until `inst` drains its prefill queue, compensated for the
/// time elapsed since the last queue update. An `extra` request is appended
/// after the lag-compensated backlog.
pub fn estimate_exec(
    inst: &InstanceState,
    now: f64,
    model: &LoadModel,
    extra: Option<&QueueSummary>,
) -> f64 {
    let mut total: f64 = inst.prefill_queue.iter().map(|s| s.exec + model.t_c).sum();
    if inst.kind == InstanceKind::Colocated {
        total += f64::from(inst.n_d) * model.b_d_avg;
    }
    let backlog = (total - lag(inst, now)).max(0.0);
    backlog + extra.map_or(0.0, |s| s.exec + model.t_c)
}

/// Predicted first-token gain of serving `queue` on `inst`, admitting in
/// deadline order.
///
/// Prefill instances serve one request per batch. Co-located instances
/// share each batch of length `t_budget` with `n_d` decode steps, where
/// `t_budget` is the smallest remaining TTFT or TPOT target in the queue.
pub fn estimate_gain(
    inst: &InstanceState,
    now: f64,
    model: &LoadModel,
    queue: &[QueueSummary],
) -> f64 {
    let mut order: Vec<&QueueSummary> = queue.iter().collect();
    order.sort_by(|a, b| {
        a.ttft_deadline
            .total_cmp(&b.ttft_deadline)
            .then(a.id.cmp(&b.id))
    });
    let elapsed = lag(inst, now);
    let colocated = inst.kind == InstanceKind::Colocated;
    let stretch = if colocated {
        let min_remain = order
            .iter()
            .map(|s| s.ttft_deadline - now)
            .fold(f64::INFINITY, f64::min);
        let min_tpot = order
            .iter()
            .map(|s| s.tpot_slo)
            .filter(|t| *t > 0.0)
            .fold(f64::INFINITY, f64::min);
        let t_budget = min_remain.min(min_tpot).max(model.budget_floor);
        let useful = t_budget - model.t_c - f64::from(inst.n_d) * model.b_d_avg;
        if useful > 0.0 {
            t_budget / useful
        } else {
            f64::INFINITY
        }
    } else {
        1.0
    };
    let mut work = 0.0;
    let mut gain = 0.0;
    for s in order {
        work += if colocated { s.exec } else { s.exec + model.t_c };
        let done = now + (stretch * work - elapsed).max(0.0);
        if done < s.ttft_deadline {
            gain += s.weight;
        }
    }
    gain
}

fn argmin_by(pool: &[&InstanceState], key: impl Fn(&InstanceState) -> f64) -> usize {
    pool.iter()
        .min_by(|a, b| {
            key(a)
                .total_cmp(&key(b))
                .then(a.instance_id.cmp(&b.instance_id))
        })
        .map(|s| s.instance_id)
        .expect("nonempty pool")
}

fn argmax_by(pool: &[&InstanceState], key: impl Fn(&InstanceState) -> f64) -> usize {
    pool.iter()
        .max_by(|a, b| {
            key(a)
                .total_cmp(&key(b))
                .then(b.instance_id.cmp(&a.instance_id))
        })
        .map(|s| s.instance_id)
        .expect("nonempty pool")
}

/// Decode instance with the most free KV blocks, lowest id on ties.
pub fn select_decode(pool: &[&InstanceState]) -> Result<usize, RouteError> {
    if pool.is_empty() {
        return Err(RouteError::EmptyPool("decode"));
    }
    Ok(argmax_by(pool, |s| f64::from(s.free_blocks)))
}

/// Prefill-side GoRouting selection: returns `(instance, delta_max,
/// fallback_used, deltas)`.
fn go_select(
    req: &QueueSummary,
    pool: &[&InstanceState],
    cfg: &RouteConfig,
    now: f64,
    model: &LoadModel,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, f64, bool, Vec<(usize, f64)>), RouteError> {
    if pool.is_empty() {
        return Err(RouteError::EmptyPool("prefill"));
    }
    let mut deltas = Vec::with_capacity(pool.len());
    let mut delta_max = f64::NEG_INFINITY;
    for inst in pool {
        let pre = estimate_gain(inst, now, model, &inst.prefill_queue);
        let mut with = inst.prefill_queue.clone();
        with.push(*req);
        let post = estimate_gain(inst, now, model, &with);
        let d = post - pre;
        delta_max = delta_max.max(d);
        deltas.push((inst.instance_id, d));
    }
    if delta_max <= 0.0 {
        let pick = pool[rng.random_range(0..pool.len())].instance_id;
        return Ok((pick, delta_max, true, deltas));
    }
    let candidates: Vec<&InstanceState> = pool
        .iter()
        .zip(&deltas)
        .filter(|(_, (_, d))| *d >= cfg.alpha * delta_max)
        .map(|(s, _)| *s)
        .collect();
    let exec = |s: &InstanceState| estimate_exec(s, now, model, None);
    let light: Vec<&InstanceState> = candidates
        .iter()
        .copied()
        .filter(|s| exec(s) < cfg.mu * req.ttft_slo)
        .collect();
    let not_heavy: Vec<&InstanceState> = candidates
        .iter()
        .copied()
        .filter(|s| estimate_exec(s, now, model, Some(req)) <= cfg.lambda * req.ttft_slo)
        .collect();
    let pick = if !light.is_empty() {
        argmin_by(&light, exec)
    } else if !not_heavy.is_empty() {
        argmax_by(&not_heavy, exec)
    } else {
        argmin_by(&candidates, exec)
    };
    Ok((pick, delta_max, false, deltas))
}

pub fn go_route_disagg(
    req: &QueueSummary,
    prefill_pool: &[&InstanceState],
    decode_pool: &[&InstanceState],
    cfg: &RouteConfig,
    now: f64,
    model: &LoadModel,
    rng: &mut ChaCha8Rng,
) -> Result<RouteDecision, RouteError> {
    let decode_instance = select_decode(decode_pool)?;
    let (prefill_instance, delta_gain, fallback_used, deltas) =
        go_select(req, prefill_pool, cfg, now, model, rng)?;
    Ok(RouteDecision {
        prefill_instance,
        decode_instance,
        delta_gain,
        fallback_used,
        deltas,
    })
}

pub fn go_route_colocated(
    req: &QueueSummary,
    pool: &[&InstanceState],
    cfg: &RouteConfig,
    now: f64,
    model: &LoadModel,
    rng: &mut ChaCha8Rng,
) -> Result<RouteDecision, RouteError> {
    let (inst, delta_gain, fallback_used, deltas) = go_select(req, pool, cfg, now, model, rng)?;
    Ok(RouteDecision {
        prefill_instance: inst,
        decode_instance: inst,
        delta_gain,
        fallback_used,
        deltas,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineRoute {
    MinLoad,
    RoundRobin,
}

/// Baseline prefill-side selection. `rr_next` is the round-robin cursor.
pub fn baseline_route(
    policy: BaselineRoute,
    pool: &[&InstanceState],
    now: f64,
    model: &LoadModel,
    rr_next: &mut usize,
) -> Result<usize, RouteError> {
    if pool.is_empty() {
        return Err(RouteError::EmptyPool("prefill"));
    }
    Ok(match policy {
        BaselineRoute::MinLoad => argmin_by(pool, |s| estimate_exec(s, now, model, None)),
        BaselineRoute::RoundRobin => {
            let pick = pool[*rr_next % pool.len()].instance_id;
            *rr_next = rr_next.wrapping_add(1);
            pick
        }
    })
}

/// Completion signals and dispatches that mutate the router's mirror.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StateEvent {
    Dispatched { inst: usize, summary: QueueSummary },
    PrefillFinished { inst: usize, request_id: u64 },
    DecodeStarted { inst: usize },
    RequestFinished { inst: usize },
    BlocksReport { inst: usize, free_blocks: u32 },
}

impl StateEvent {
    pub fn instance(&self) -> usize {
        match self {
            StateEvent::Dispatched { inst, .. }
            | StateEvent::PrefillFinished { inst, .. }
            | StateEvent::DecodeStarted { inst }
            | StateEvent::RequestFinished { inst }
            | StateEvent::BlocksReport { inst, .. } => *inst,
        }
    }
}

/// Applies one event to the instance map (indexed by instance id).
pub fn state_update(
    map: &mut [InstanceState],
    event: &StateEvent,
    now: f64,
) -> Result<(), RouteError> {
    let id = event.instance();
    let inst = map.get_mut(id).ok_or(RouteError::UnknownInstance(id))?;
    match event {
        StateEvent::Dispatched { summary, .. } => {
            if inst.prefill_queue.iter().any(|s| s.id == summary.id) {
                return Err(RouteError::Consistency {
                    inst: id,
                    msg: format!("request {} dispatched twice", summary.id),
                });
            }
            inst.prefill_queue.push(*summary);
            inst.ts_p = now;
        }
        StateEvent::PrefillFinished { request_id, .. } => {
            let pos = inst
                .prefill_queue
                .iter()
                .position(|s| s.id == *request_id)
                .ok_or_else(|| RouteError::Consistency {
                    inst: id,
                    msg: format!("request {request_id} is not in the prefill queue"),
                })?;
            inst.prefill_queue.remove(pos);
            inst.ts_p = now;
        }
        StateEvent::DecodeStarted { .. } => inst.n_d += 1,
        StateEvent::RequestFinished { .. } => {
            inst.n_d = inst.n_d.checked_sub(1).ok_or_else(|| RouteError::Consistency {
                inst: id,
                msg: "request finished with no decode in flight".into(),
            })?;
        }
        StateEvent::BlocksReport { free_blocks, .. } => inst.free_blocks = *free_blocks,
    }
    Ok(())
}
