//! Deterministic discrete-event simulation of a serving cluster.
//!
//! Engines run one batch at a time and form the next batch as soon as the
//! previous one completes. Schedulers estimate with `sched_params`, while
//! batch durations come from `true_params` scaled by the drift schedule and
//! an optional multiplicative noise, so estimation error and its online
//! correction are both visible. Every token of a batch is stamped at the
//! batch completion time.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gain::{aggregate, tdg_token_gains, GainError, GainReport, GainWeights, Priority, TokenRecord};
use crate::latmodel::{CorrectionConfig, DriftSchedule, LatencyModelParams, OnlineCorrector, Phase, WorkItem};
use crate::sched_global::{
    baseline_route, go_route_colocated, go_route_disagg, select_decode, state_update, BaselineRoute,
    InstanceKind, InstanceState, LoadModel, QueueSummary, RouteConfig, RouteDecision, RouteError, StateEvent,
};
use crate::sched_local::{
    baseline_batch, slide_batch, BaselineConfig, BaselinePolicy, BatchEntry, BatchPlan, MemoryBudget,
    PhiVariant, SchedError, SchedRequest, SlideConfig, VtcState,
};
use crate::workload::{scale_to_rate, Request};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("invalid workload: {0}")]
    Workload(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error(transparent)]
    Gain(#[from] GainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    SingleColocated,
    MultiColocated { n: usize },
    PdDisagg { n_prefill: usize, n_decode: usize },
}

impl Topology {
    /// Instance kinds in id order; prefill instances precede decode ones.
    pub fn kinds(&self) -> Vec<InstanceKind> {
        match *self {
            Topology::SingleColocated => vec![InstanceKind::Colocated],
            Topology::MultiColocated { n } => vec![InstanceKind::Colocated; n],
            Topology::PdDisagg { n_prefill, n_decode } => {
                let mut v = vec![InstanceKind::Prefill; n_prefill];
                v.extend(vec![InstanceKind::Decode; n_decode]);
                v
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalPolicy {
    Slide,
    VllmFcfs,
    SarathiFcfs,
    SarathiPriority,
    FairBatching,
    WeightedVtc,
}

impl LocalPolicy {
    pub const ALL: [LocalPolicy; 6] = [
        LocalPolicy::Slide,
        LocalPolicy::VllmFcfs,
        LocalPolicy::SarathiFcfs,
        LocalPolicy::SarathiPriority,
        LocalPolicy::FairBatching,
        LocalPolicy::WeightedVtc,
    ];

    pub fn name(self) -> &'static str {
        match self.baseline() {
            None => "slide",
            Some(b) => b.name(),
        }
    }

    pub fn baseline(self) -> Option<BaselinePolicy> {
        match self {
            LocalPolicy::Slide => None,
            LocalPolicy::VllmFcfs => Some(BaselinePolicy::VllmFcfs),
            LocalPolicy::SarathiFcfs => Some(BaselinePolicy::SarathiFcfs),
            LocalPolicy::SarathiPriority => Some(BaselinePolicy::SarathiPriority),
            LocalPolicy::FairBatching => Some(BaselinePolicy::FairBatching),
            LocalPolicy::WeightedVtc => Some(BaselinePolicy::WeightedVtc),
        }
    }
}

impl FromStr for LocalPolicy {
    type Err = SchedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LocalPolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| SchedError::UnknownPolicy(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalPolicy {
    GoRouting,
    MinLoad,
    RoundRobin,
}

impl GlobalPolicy {
    pub const ALL: [GlobalPolicy; 3] = [GlobalPolicy::GoRouting, GlobalPolicy::MinLoad, GlobalPolicy::RoundRobin];

    pub fn name(self) -> &'static str {
        match self {
            GlobalPolicy::GoRouting => "go_routing",
            GlobalPolicy::MinLoad => "min_load",
            GlobalPolicy::RoundRobin => "round_robin",
        }
    }
}

impl FromStr for GlobalPolicy {
    type Err = RouteError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GlobalPolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| RouteError::Config(format!("unknown global policy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub topology: Topology,
    /// Cost model used to execute batches.
    pub true_params: LatencyModelParams,
    /// Cost model seen by the schedulers; `None` uses `true_params`.
    pub sched_params: Option<LatencyModelParams>,
    pub drift: DriftSchedule,
    /// Relative standard deviation of Gaussian noise on batch durations.
    pub exec_noise: f64,
    pub blocks_per_instance: u32,
    pub block_size: u32,
    /// Fraction of blocks kept free when admitting a request that holds none.
    pub watermark: f64,
    pub seed: u64,
    /// Simulated time limit (ms).
    pub horizon: f64,
    pub local_policy: LocalPolicy,
    pub slide: SlideConfig,
    pub baseline: BaselineConfig,
    pub global_policy: GlobalPolicy,
    pub route: RouteConfig,
    pub correction: Option<CorrectionConfig>,
    /// Delay of completion signals from engines to the router (ms).
    pub router_delay: f64,
    /// KV transfer time from prefill to decode instance (ms).
    pub kv_transfer_delay: f64,
    pub audit: bool,
    pub timeline_bin_ms: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            topology: Topology::SingleColocated,
            true_params: LatencyModelParams::default(),
            sched_params: None,
            drift: DriftSchedule::default(),
            exec_noise: 0.0,
            blocks_per_instance: 4096,
            block_size: 16,
            watermark: 0.01,
            seed: 0,
            horizon: 600_000.0,
            local_policy: LocalPolicy::Slide,
            slide: SlideConfig::default(),
            baseline: BaselineConfig::default(),
            global_policy: GlobalPolicy::GoRouting,
            route: RouteConfig::default(),
            correction: None,
            router_delay: 0.0,
            kv_transfer_delay: 0.0,
            audit: false,
            timeline_bin_ms: 1000.0,
        }
    }
}

impl SimConfig {
    pub fn watermark_blocks(&self) -> u32 {
        (self.watermark * f64::from(self.blocks_per_instance)).floor() as u32
    }

    pub fn sched_params(&self) -> LatencyModelParams {
        self.sched_params.unwrap_or(self.true_params)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if !(self.horizon > 0.0) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.blocks_per_instance < 1 || self.block_size < 1 {
            return bad("blocks_per_instance and block_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.watermark) {
            return bad(format!("watermark must be in [0, 1), got {}", self.watermark));
        }
        match self.topology {
            Topology::MultiColocated { n } if n == 0 => return bad("multi_colocated needs n >= 1".into()),
            Topology::PdDisagg { n_prefill, n_decode } if n_prefill == 0 || n_decode == 0 => {
                return bad("pd_disagg needs at least one prefill and one decode instance".into())
            }
            _ => {}
        }
        self.true_params.validate().map_err(|m| SimError::Config(format!("true_params: {m}")))?;
        self.sched_params()
            .validate_for_scheduling()
            .map_err(|m| SimError::Config(format!("sched_params: {m}")))?;
        self.slide.validate().map_err(|m| SimError::Config(format!("slide: {m}")))?;
        self.route.validate()?;
        if !(self.exec_noise >= 0.0 && self.exec_noise < 0.3) {
            return bad(format!("exec_noise must be in [0, 0.3), got {}", self.exec_noise));
        }
        if self.drift.steps.iter().any(|(_, f)| !(*f > 0.0)) {
            return bad("drift factors must be positive".into());
        }
        if !(self.router_delay >= 0.0 && self.kv_transfer_delay >= 0.0) {
            return bad("delays must be nonnegative".into());
        }
        if !(self.timeline_bin_ms > 0.0) {
            return bad("timeline_bin_ms must be positive".into());
        }
        if let Some(c) = self.correction {
            if c.window == 0 || !(0.0..1.0).contains(&c.theta) {
                return bad("correction needs window >= 1 and theta in [0, 1)".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineBin {
    pub start_ms: f64,
    pub tdg: f64,
    pub tokens: u64,
    pub batches: u64,
    pub urgent_mean: f64,
    pub normal_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceStats {
    pub id: usize,
    pub kind: InstanceKind,
    pub batches: u64,
    pub busy_ms: f64,
    pub utilization: f64,
    pub idle_retries: u64,
    pub preemptions: u64,
    pub final_beta: f64,
}

/// Observed duration and scheduler estimate of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchObs {
    pub instance: usize,
    pub start: f64,
    pub observed: f64,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditRecord {
    Route {
        time: f64,
        request: u64,
        decision: RouteDecision,
    },
    Signal {
        time: f64,
        signal: StateEvent,
    },
    IdleRetry {
        time: f64,
        instance: usize,
        queued: usize,
    },
    Preempt {
        time: f64,
        instance: usize,
        request: u64,
    },
    Correction {
        time: f64,
        instance: usize,
        beta: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// One record per request, in workload order.
    pub records: Vec<TokenRecord>,
    pub report: GainReport,
    pub timeline: Vec<TimelineBin>,
    pub instances: Vec<InstanceStats>,
    /// Prompt and output tokens processed per priority class.
    pub served_tokens: BTreeMap<Priority, u64>,
    pub batches: Vec<BatchObs>,
    pub audit: Vec<AuditRecord>,
    pub end_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum EventKind {
    Arrival(usize),
    BatchDone(usize),
    Wake(usize),
    Signal(StateEvent),
    Handoff { inst: usize, req: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap: reverse for earliest (time, seq) first.
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Live {
    emit: Vec<f64>,
    prefill_inst: usize,
    decode_inst: usize,
}

struct InFlight {
    start: f64,
    entries: Vec<BatchEntry>,
    raw_estimate: f64,
    estimate: f64,
}

struct Engine {
    kind: InstanceKind,
    queue: Vec<SchedRequest>,
    free_blocks: u32,
    in_flight: Option<InFlight>,
    next_wake: Option<f64>,
    vtc: VtcState,
    params: LatencyModelParams,
    corrector: Option<OnlineCorrector>,
    busy_ms: f64,
    batches: u64,
    idle_retries: u64,
    preemptions: u64,
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    weights: &'a GainWeights,
    workload: &'a [Request],
    heap: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    live: Vec<Live>,
    by_id: BTreeMap<u64, usize>,
    engines: Vec<Engine>,
    mirror: Vec<InstanceState>,
    route_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    rr_next: usize,
    input_sum: f64,
    dispatched: u64,
    served: BTreeMap<Priority, u64>,
    plan_bins: BTreeMap<usize, (u64, f64, f64)>,
    batch_log: Vec<BatchObs>,
    audit: Vec<AuditRecord>,
}

fn sched_request(r: &Request) -> SchedRequest {
    SchedRequest::new(r.id, r.arrival_time, r.priority, r.slo, r.input_len)
}

/// One batch of every request that fits in memory, oldest first.
fn decode_plan(queue: &[SchedRequest], params: &LatencyModelParams, mem: &MemoryBudget, max_seqs: usize) -> BatchPlan {
    let mut idx: Vec<usize> = (0..queue.len()).collect();
    idx.sort_by(|&a, &b| {
        queue[a]
            .arrival_time
            .total_cmp(&queue[b].arrival_time)
            .then(queue[a].id.cmp(&queue[b].id))
    });
    let mut entries = Vec::new();
    let mut used = 0u32;
    let mut est = params.overhead();
    for i in idx {
        if entries.len() >= max_seqs {
            break;
        }
        let r = &queue[i];
        let need = mem.blocks_needed(r);
        if !mem.fits(r, need, used) {
            continue;
        }
        // preempted requests recompute their whole context in one pass
        let (chunk, item) = match r.phase() {
            Phase::Decode => (1, WorkItem::decode(r.kv_len)),
            Phase::Prefill => (r.remaining_prompt(), r.next_pass()),
        };
        let t = params.estimate_item(&item);
        used += need;
        est += t;
        entries.push(BatchEntry {
            id: r.id,
            phase: r.phase(),
            chunk_len: chunk,
            est_time: t,
            new_blocks: need,
        });
    }
    BatchPlan {
        entries,
        est_time: est,
        budget: est,
        urgent: 0,
        normal: queue.len(),
    }
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a SimConfig, weights: &'a GainWeights, workload: &'a [Request]) -> Result<Self, SimError> {
        let sched = cfg.sched_params();
        let kinds = cfg.topology.kinds();
        let engines = kinds
            .iter()
            .map(|&kind| Engine {
                kind,
                queue: Vec::new(),
                free_blocks: cfg.blocks_per_instance,
                in_flight: None,
                next_wake: None,
                vtc: VtcState::default(),
                params: sched,
                corrector: cfg.correction.map(OnlineCorrector::new),
                busy_ms: 0.0,
                batches: 0,
                idle_retries: 0,
                preemptions: 0,
            })
            .collect();
        let mirror = kinds
            .iter()
            .enumerate()
            .map(|(i, &k)| InstanceState::new(i, k, cfg.blocks_per_instance))
            .collect();
        let mut by_id = BTreeMap::new();
        for (k, r) in workload.iter().enumerate() {
            if by_id.insert(r.id, k).is_some() {
                return Err(SimError::Workload(format!("duplicate request id {}", r.id)));
            }
        }
        let mut route_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        route_rng.set_stream(1);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        noise_rng.set_stream(2);
        Ok(Sim {
            cfg,
            weights,
            workload,
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            live: workload
                .iter()
                .map(|_| Live {
                    emit: Vec::new(),
                    prefill_inst: usize::MAX,
                    decode_inst: usize::MAX,
                })
                .collect(),
            by_id,
            engines,
            mirror,
            route_rng,
            noise_rng,
            rr_next: 0,
            input_sum: 0.0,
            dispatched: 0,
            served: BTreeMap::new(),
            plan_bins: BTreeMap::new(),
            batch_log: Vec::new(),
            audit: Vec::new(),
        })
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        self.heap.push(Event {
            time,
            seq: self.seq,
            kind,
        });
        self.seq += 1;
    }

    fn signal(&mut self, ev: StateEvent) {
        self.push(self.now + self.cfg.router_delay, EventKind::Signal(ev));
    }

    fn apply_signal(&mut self, ev: StateEvent) -> Result<(), SimError> {
        state_update(&mut self.mirror, &ev, self.now)?;
        if self.cfg.audit {
            self.audit.push(AuditRecord::Signal {
                time: self.now,
                signal: ev,
            });
        }
        Ok(())
    }

    /// Schedules an immediate scheduling attempt unless one is pending.
    fn poke(&mut self, i: usize) {
        let e = &self.engines[i];
        if e.in_flight.is_some() || e.next_wake.is_some_and(|t| t <= self.now) {
            return;
        }
        self.engines[i].next_wake = Some(self.now);
        self.push(self.now, EventKind::Wake(i));
    }

    fn router_model(&self) -> (LatencyModelParams, LoadModel) {
        let beta = self.engines.iter().map(|e| e.params.beta).sum::<f64>() / self.engines.len() as f64;
        let p = self.cfg.sched_params().with_beta(beta);
        let mean_input = if self.dispatched > 0 {
            self.input_sum / self.dispatched as f64
        } else {
            0.0
        };
        let b_d_avg = self
            .cfg
            .route
            .b_d_avg
            .unwrap_or_else(|| p.estimate_item(&WorkItem::decode(mean_input.round() as u32)));
        (p, LoadModel::new(&p, b_d_avg, self.cfg.route.budget_floor))
    }

    fn arrival(&mut self, k: usize) -> Result<(), SimError> {
        let req = &self.workload[k];
        self.input_sum += f64::from(req.input_len);
        self.dispatched += 1;
        let (params, model) = self.router_model();
        let summary = QueueSummary {
            id: req.id,
            exec: params.estimate_item(&WorkItem::prefill(req.input_len, 0)),
            ttft_deadline: req.arrival_time + req.slo.ttft_slo,
            ttft_slo: req.slo.ttft_slo,
            tpot_slo: req.slo.tpot_slo,
            weight: self.weights.token_weight(req.priority, 1)?,
        };
        let prefill_pool: Vec<&InstanceState> =
            self.mirror.iter().filter(|s| s.kind != InstanceKind::Decode).collect();
        let decode_pool: Vec<&InstanceState> =
            self.mirror.iter().filter(|s| s.kind == InstanceKind::Decode).collect();
        let disagg = !decode_pool.is_empty();
        let decision = match self.cfg.global_policy {
            GlobalPolicy::GoRouting if disagg => go_route_disagg(
                &summary,
                &prefill_pool,
                &decode_pool,
                &self.cfg.route,
                self.now,
                &model,
                &mut self.route_rng,
            )?,
            GlobalPolicy::GoRouting => {
                go_route_colocated(&summary, &prefill_pool, &self.cfg.route, self.now, &model, &mut self.route_rng)?
            }
            GlobalPolicy::MinLoad | GlobalPolicy::RoundRobin => {
                let policy = if self.cfg.global_policy == GlobalPolicy::MinLoad {
                    BaselineRoute::MinLoad
                } else {
                    BaselineRoute::RoundRobin
                };
                let p = baseline_route(policy, &prefill_pool, self.now, &model, &mut self.rr_next)?;
                RouteDecision {
                    prefill_instance: p,
                    decode_instance: if disagg { select_decode(&decode_pool)? } else { p },
                    delta_gain: 0.0,
                    fallback_used: false,
                    deltas: Vec::new(),
                }
            }
        };
        let (p, d) = (decision.prefill_instance, decision.decode_instance);
        if self.cfg.audit {
            self.audit.push(AuditRecord::Route {
                time: self.now,
                request: req.id,
                decision,
            });
        }
        self.live[k].prefill_inst = p;
        self.live[k].decode_inst = d;
        self.apply_signal(StateEvent::Dispatched { inst: p, summary })?;
        self.engines[p].queue.push(sched_request(req));
        self.poke(p);
        Ok(())
    }

    fn form_plan(&mut self, i: usize) -> Result<BatchPlan, SimError> {
        let cfg = self.cfg;
        let e = &mut self.engines[i];
        let mem = MemoryBudget {
            free_blocks: e.free_blocks,
            block_size: cfg.block_size,
            watermark_blocks: cfg.watermark_blocks(),
            max_new_blocks: None,
        };
        if e.kind == InstanceKind::Decode {
            return Ok(decode_plan(&e.queue, &e.params, &mem, cfg.baseline.max_num_seqs));
        }
        Ok(match cfg.local_policy.baseline() {
            None => {
                let mut slide = cfg.slide;
                if e.kind == InstanceKind::Prefill {
                    slide.phi_variant = PhiVariant::PrefillOnly;
                }
                slide_batch(&mut e.queue, &e.params, self.weights, &slide, self.now, &mem)?
            }
            Some(b) => baseline_batch(
                b,
                &mut e.queue,
                &e.params,
                self.weights,
                &cfg.baseline,
                self.now,
                &mem,
                &mut e.vtc,
            )?,
        })
    }

    /// Releases the KV blocks of the lowest-priority, latest-arriving
    /// holder, which later recomputes its context as a prompt. Returns
    /// false when no request holds blocks.
    fn preempt(&mut self, i: usize) -> bool {
        let e = &mut self.engines[i];
        let Some(r) = e
            .queue
            .iter_mut()
            .filter(|r| r.held_blocks > 0)
            .min_by(|a, b| {
                a.priority
                    .cmp(&b.priority)
                    .then(b.arrival_time.total_cmp(&a.arrival_time))
                    .then(b.id.cmp(&a.id))
            })
        else {
            return false;
        };
        if r.phase() == Phase::Decode {
            r.input_len = r.kv_len + 1;
        }
        r.prefill_done = 0;
        r.kv_len = 0;
        e.free_blocks += r.held_blocks;
        r.held_blocks = 0;
        e.preemptions += 1;
        if self.cfg.audit {
            let request = r.id;
            self.audit.push(AuditRecord::Preempt {
                time: self.now,
                instance: i,
                request,
            });
        }
        true
    }

    fn try_start(&mut self, i: usize) -> Result<(), SimError> {
        if self.engines[i].in_flight.is_some() || self.engines[i].queue.is_empty() {
            return Ok(());
        }
        let mut plan = self.form_plan(i)?;
        while plan.is_empty() && self.preempt(i) {
            plan = self.form_plan(i)?;
        }
        if plan.is_empty() {
            let eta = self.cfg.slide.eta_for(&self.engines[i].queue);
            let e = &mut self.engines[i];
            e.idle_retries += 1;
            let at = self.now + eta;
            e.next_wake = Some(at);
            if self.cfg.audit {
                self.audit.push(AuditRecord::IdleRetry {
                    time: self.now,
                    instance: i,
                    queued: self.engines[i].queue.len(),
                });
            }
            self.push(at, EventKind::Wake(i));
            return Ok(());
        }
        let bin = (self.now / self.cfg.timeline_bin_ms) as usize;
        let slot = self.plan_bins.entry(bin).or_insert((0, 0.0, 0.0));
        slot.0 += 1;
        slot.1 += plan.urgent as f64;
        slot.2 += plan.normal as f64;

        let e = &mut self.engines[i];
        let pos: BTreeMap<u64, usize> = e.queue.iter().enumerate().map(|(k, r)| (r.id, k)).collect();
        let mut items = Vec::with_capacity(plan.entries.len());
        for entry in &plan.entries {
            let r = &mut e.queue[pos[&entry.id]];
            items.push(r.work_item(entry.chunk_len));
            e.free_blocks = e.free_blocks.checked_sub(entry.new_blocks).ok_or_else(|| {
                SimError::Invariant(format!("instance {i} over-allocated KV blocks"))
            })?;
            r.held_blocks += entry.new_blocks;
        }
        let raw_estimate = e.params.raw_batch(&items);
        let estimate = e.params.estimate_batch(&items);
        let mut duration = self.cfg.true_params.estimate_batch(&items) * self.cfg.drift.factor_at(self.now);
        if self.cfg.exec_noise > 0.0 {
            let n = Normal::new(0.0, self.cfg.exec_noise).expect("validated noise");
            duration *= (1.0 + n.sample(&mut self.noise_rng)).max(0.1);
        }
        let duration = duration.max(1e-6);
        e.in_flight = Some(InFlight {
            start: self.now,
            entries: plan.entries,
            raw_estimate,
            estimate,
        });
        self.push(self.now + duration, EventKind::BatchDone(i));
        Ok(())
    }

    fn batch_done(&mut self, i: usize) -> Result<(), SimError> {
        let now = self.now;
        let f = self.engines[i]
            .in_flight
            .take()
            .ok_or_else(|| SimError::Invariant(format!("instance {i} finished a batch it never started")))?;
        let observed = now - f.start;
        {
            let e = &mut self.engines[i];
            e.busy_ms += observed;
            e.batches += 1;
            if let Some(c) = e.corrector.as_mut() {
                if let Some(p) = c.observe(&e.params, observed, f.raw_estimate) {
                    e.params = p;
                    if self.cfg.audit {
                        self.audit.push(AuditRecord::Correction {
                            time: now,
                            instance: i,
                            beta: p.beta,
                        });
                    }
                }
            }
        }
        self.batch_log.push(BatchObs {
            instance: i,
            start: f.start,
            observed,
            estimate: f.estimate,
        });

        let kind = self.engines[i].kind;
        let mut removed: Vec<u64> = Vec::new();
        let mut signals: Vec<StateEvent> = Vec::new();
        let mut handoffs: Vec<(usize, usize)> = Vec::new();
        let pos: BTreeMap<u64, usize> =
            self.engines[i].queue.iter().enumerate().map(|(k, r)| (r.id, k)).collect();
        for entry in &f.entries {
            let k = self.by_id[&entry.id];
            let r = &mut self.engines[i].queue[pos[&entry.id]];
            *self.served.entry(r.priority).or_insert(0) += u64::from(entry.chunk_len);
            let emitted = match entry.phase {
                Phase::Prefill => {
                    r.prefill_done += entry.chunk_len;
                    r.kv_len += entry.chunk_len;
                    if r.prefill_done == r.input_len {
                        r.output_len += 1;
                        true
                    } else {
                        false
                    }
                }
                Phase::Decode => {
                    r.kv_len += 1;
                    r.output_len += 1;
                    true
                }
            };
            if !emitted {
                continue;
            }
            self.live[k].emit.push(now);
            let expected = self.workload[k].expected_output_len;
            let first = r.output_len == 1;
            if r.output_len >= expected {
                removed.push(r.id);
                if first {
                    signals.push(StateEvent::PrefillFinished { inst: i, request_id: r.id });
                } else {
                    signals.push(StateEvent::RequestFinished { inst: i });
                }
            } else if first {
                signals.push(StateEvent::PrefillFinished { inst: i, request_id: r.id });
                if kind == InstanceKind::Prefill {
                    removed.push(r.id);
                    handoffs.push((self.live[k].decode_inst, k));
                } else {
                    signals.push(StateEvent::DecodeStarted { inst: i });
                }
            }
        }
        let e = &mut self.engines[i];
        if !removed.is_empty() {
            let mut freed = 0u32;
            e.queue.retain(|r| {
                if removed.contains(&r.id) {
                    freed += r.held_blocks;
                    false
                } else {
                    true
                }
            });
            e.free_blocks += freed;
        }
        if cfg!(debug_assertions) {
            let held: u64 = e.queue.iter().map(|r| u64::from(r.held_blocks)).sum();
            if held + u64::from(e.free_blocks) != u64::from(self.cfg.blocks_per_instance) {
                return Err(SimError::Invariant(format!("instance {i} leaked KV blocks")));
            }
        }
        if kind == InstanceKind::Decode {
            signals.push(StateEvent::BlocksReport {
                inst: i,
                free_blocks: self.engines[i].free_blocks,
            });
        }
        for s in signals {
            self.signal(s);
        }
        for (d, k) in handoffs {
            self.push(now + self.cfg.kv_transfer_delay, EventKind::Handoff { inst: d, req: k });
        }
        self.try_start(i)
    }

    fn handoff(&mut self, d: usize, k: usize) {
        let req = &self.workload[k];
        let mut r = sched_request(req);
        r.prefill_done = req.input_len;
        r.kv_len = req.input_len;
        r.output_len = 1;
        self.engines[d].queue.push(r);
        self.signal(StateEvent::DecodeStarted { inst: d });
        self.poke(d);
    }

    fn run(mut self) -> Result<SimResult, SimError> {
        for k in 0..self.workload.len() {
            self.push(self.workload[k].arrival_time, EventKind::Arrival(k));
        }
        let horizon = self.cfg.horizon;
        while let Some(ev) = self.heap.peek() {
            if ev.time > horizon {
                break;
            }
            let ev = self.heap.pop().expect("peeked");
            if ev.time < self.now {
                return Err(SimError::Invariant("event time went backwards".into()));
            }
            self.now = ev.time;
            match ev.kind {
                EventKind::Arrival(k) => self.arrival(k)?,
                EventKind::BatchDone(i) => self.batch_done(i)?,
                EventKind::Wake(i) => {
                    if self.engines[i].next_wake == Some(ev.time) {
                        self.engines[i].next_wake = None;
                        self.try_start(i)?;
                    }
                }
                EventKind::Signal(s) => self.apply_signal(s)?,
                EventKind::Handoff { inst, req } => self.handoff(inst, req),
            }
        }
        let end = if self.heap.is_empty() { self.now } else { horizon };
        self.finish(end)
    }

    fn finish(mut self, end: f64) -> Result<SimResult, SimError> {
        let records: Vec<TokenRecord> = self
            .workload
            .iter()
            .zip(std::mem::take(&mut self.live))
            .map(|(r, l)| TokenRecord {
                request_id: r.id,
                arrival_time: r.arrival_time,
                priority: r.priority,
                emit_times: l.emit,
                expected_output_len: r.expected_output_len,
            })
            .collect();
        let slos: Vec<_> = self.workload.iter().map(|r| r.slo).collect();
        let report = if records.is_empty() {
            GainReport::empty()
        } else {
            aggregate(&records, &slos, self.weights)?
        };

        let bin_ms = self.cfg.timeline_bin_ms;
        let n_bins = ((end / bin_ms).floor() as usize + 1).min(1 + (self.cfg.horizon / bin_ms) as usize);
        let mut timeline: Vec<TimelineBin> = (0..n_bins)
            .map(|b| TimelineBin {
                start_ms: b as f64 * bin_ms,
                tdg: 0.0,
                tokens: 0,
                batches: 0,
                urgent_mean: 0.0,
                normal_mean: 0.0,
            })
            .collect();
        for (rec, slo) in records.iter().zip(&slos) {
            for (t, g) in rec.emit_times.iter().zip(tdg_token_gains(rec, slo, self.weights)?) {
                if let Some(bin) = timeline.get_mut((t / bin_ms) as usize) {
                    bin.tdg += g;
                    bin.tokens += 1;
                }
            }
        }
        for (b, (n, u, m)) in &self.plan_bins {
            if let Some(bin) = timeline.get_mut(*b) {
                bin.batches = *n;
                bin.urgent_mean = u / *n as f64;
                bin.normal_mean = m / *n as f64;
            }
        }

        let instances = self
            .engines
            .iter()
            .enumerate()
            .map(|(id, e)| {
                let partial = e.in_flight.as_ref().map_or(0.0, |f| (end - f.start).max(0.0));
                let busy = e.busy_ms + partial;
                InstanceStats {
                    id,
                    kind: e.kind,
                    batches: e.batches,
                    busy_ms: busy,
                    utilization: if end > 0.0 { busy / end } else { 0.0 },
                    idle_retries: e.idle_retries,
                    preemptions: e.preemptions,
                    final_beta: e.params.beta,
                }
            })
            .collect();
        Ok(SimResult {
            records,
            report,
            timeline,
            instances,
            served_tokens: self.served,
            batches: self.batch_log,
            audit: self.audit,
            end_time: end,
        })
    }
}

fn check_workload(workload: &[Request], weights: &GainWeights) -> Result<(), SimError> {
    for (k, r) in workload.iter().enumerate() {
        if r.input_len < 1 || r.expected_output_len < 1 {
            return Err(SimError::Workload(format!("request {} has empty prompt or output", r.id)));
        }
        if !(r.arrival_time >= 0.0 && r.arrival_time.is_finite()) {
            return Err(SimError::Workload(format!("request {} has arrival {}", r.id, r.arrival_time)));
        }
        if k > 0 && workload[k - 1].arrival_time > r.arrival_time {
            return Err(SimError::Workload("requests must be sorted by arrival time".into()));
        }
        r.slo.validate_for(r.expected_output_len)?;
        weights.priority_weight(r.priority)?;
    }
    Ok(())
}

/// Simulates `workload` (sorted by arrival) under `cfg`.
pub fn run(cfg: &SimConfig, weights: &GainWeights, workload: &[Request]) -> Result<SimResult, SimError> {
    cfg.validate()?;
    weights.validate()?;
    check_workload(workload, weights)?;
    Sim::new(cfg, weights, workload)?.run()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub rate: f64,
    pub report: GainReport,
}

/// Rescales `template` to each rate and simulates it.
pub fn sweep(
    cfg: &SimConfig,
    weights: &GainWeights,
    rates: &[f64],
    template: &[Request],
) -> Result<Vec<SweepPoint>, SimError> {
    rates
        .iter()
        .map(|&rate| {
            let mut reqs = template.to_vec();
            scale_to_rate(&mut reqs, rate).map_err(|e| SimError::Workload(e.to_string()))?;
            Ok(SweepPoint {
                rate,
                report: run(cfg, weights, &reqs)?.report,
            })
        })
        .collect()
}

/// Mean absolute percentage error of the batch estimates in each window of
/// `window` consecutive batches on `instance`.
pub fn windowed_mape(batches: &[BatchObs], instance: usize, window: usize) -> Vec<f64> {
    let obs: Vec<&BatchObs> = batches.iter().filter(|b| b.instance == instance).collect();
    obs.chunks_exact(window.max(1))
        .map(|w| w.iter().map(|b| ((b.estimate - b.observed) / b.observed).abs()).sum::<f64>() / w.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gain::SloSpec;
    use crate::workload::{generate, WorkloadSpec};

    fn req(id: u64, at: f64, input: u32, output: u32, p: Priority) -> Request {
        Request {
            id,
            arrival_time: at,
            input_len: input,
            expected_output_len: output,
            priority: p,
            slo: SloSpec::new(5000.0, 100.0).unwrap(),
        }
    }

    #[test]
    fn single_request_closed_form() {
        let cfg = SimConfig::default();
        let p = cfg.true_params;
        let w = GainWeights::two_class_default();
        let r = req(0, 10.0, 300, 5, Priority::LOW);
        let res = run(&cfg, &w, &[r]).unwrap();
        let rec = &res.records[0];
        let mut t = 10.0 + p.estimate_batch(&[WorkItem::prefill(300, 0)]);
        let mut expect = vec![t];
        for k in 0..4 {
            t += p.estimate_batch(&[WorkItem::decode(300 + k)]);
            expect.push(t);
        }
        assert_eq!(rec.emit_times.len(), 5);
        for (a, b) in rec.emit_times.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!((rec.ttft().unwrap() - (p.estimate_item(&WorkItem::prefill(300, 0)) + p.t_c)).abs() < 1e-9);
        assert_eq!(res.report.slo_attainment, 1.0);
    }

    #[test]
    fn zero_requests() {
        let res = run(&SimConfig::default(), &GainWeights::two_class_default(), &[]).unwrap();
        assert_eq!(res.report, GainReport::empty());
        assert_eq!(res.report.ideal_gain, 0.0);
    }

    fn busy_workload(seed: u64) -> Vec<Request> {
        let mut s = WorkloadSpec::poisson_default(8.0, 20_000.0, seed);
        s.slo = crate::workload::SloPolicy::Fixed { ttft: 2000.0, tpot: 60.0 };
        generate(&s).unwrap()
    }

    fn check_invariants(res: &SimResult, workload: &[Request]) {
        assert_eq!(res.records.len(), workload.len());
        for (rec, r) in res.records.iter().zip(workload) {
            assert!(rec.emit_times.len() as u32 <= r.expected_output_len);
            assert!(rec.emit_times.windows(2).all(|w| w[0] < w[1]));
            assert!(rec.emit_times.first().is_none_or(|t| *t > r.arrival_time));
        }
    }

    #[test]
    fn every_topology_and_policy_runs() {
        let w = GainWeights::two_class_default();
        let reqs = busy_workload(1);
        for topology in [
            Topology::SingleColocated,
            Topology::MultiColocated { n: 3 },
            Topology::PdDisagg { n_prefill: 2, n_decode: 2 },
        ] {
            for local in LocalPolicy::ALL {
                for global in GlobalPolicy::ALL {
                    let cfg = SimConfig {
                        topology,
                        local_policy: local,
                        global_policy: global,
                        blocks_per_instance: 2048,
                        horizon: 60_000.0,
                        router_delay: 1.0,
                        kv_transfer_delay: 2.0,
                        ..SimConfig::default()
                    };
                    let res = run(&cfg, &w, &reqs).unwrap();
                    check_invariants(&res, &reqs);
                    assert!(res.report.total_gain > 0.0, "{topology:?} {local:?} {global:?}");
                }
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let w = GainWeights::two_class_default();
        let reqs = busy_workload(2);
        let cfg = SimConfig {
            topology: Topology::PdDisagg { n_prefill: 2, n_decode: 1 },
            exec_noise: 0.05,
            audit: true,
            ..SimConfig::default()
        };
        let a = serde_json::to_string(&run(&cfg, &w, &reqs).unwrap()).unwrap();
        let b = serde_json::to_string(&run(&cfg, &w, &reqs).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kv_exhaustion_idles_and_retries() {
        let w = GainWeights::two_class_default();
        // each prompt needs 4 of the 6 blocks, so only one runs at a time
        let reqs: Vec<Request> = (0..3).map(|i| req(i, 0.0, 64, 8, Priority::LOW)).collect();
        let cfg = SimConfig {
            blocks_per_instance: 6,
            audit: true,
            ..SimConfig::default()
        };
        let res = run(&cfg, &w, &reqs).unwrap();
        check_invariants(&res, &reqs);
        assert!(res.records.iter().all(|r| r.is_complete()));
        // a prompt larger than the whole cache never runs
        let big = vec![req(0, 0.0, 1000, 2, Priority::LOW)];
        let cfg = SimConfig {
            blocks_per_instance: 6,
            horizon: 1000.0,
            audit: true,
            ..SimConfig::default()
        };
        let res = run(&cfg, &w, &big).unwrap();
        assert!(res.records[0].emit_times.is_empty());
        assert!(res.instances[0].idle_retries > 0);
        assert!(res.audit.iter().any(|a| matches!(a, AuditRecord::IdleRetry { .. })));
    }

    #[test]
    fn horizon_truncates() {
        let w = GainWeights::two_class_default();
        let reqs = vec![req(0, 0.0, 100, 1000, Priority::LOW)];
        let cfg = SimConfig {
            horizon: 500.0,
            ..SimConfig::default()
        };
        let res = run(&cfg, &w, &reqs).unwrap();
        let n = res.records[0].emit_times.len();
        assert!(n > 0 && n < 1000);
        assert!(res.records[0].emit_times.iter().all(|t| *t <= 500.0));
        let ideal = w.w_first + 999.0 * w.w_decode;
        assert_eq!(res.report.ideal_gain, ideal);
    }

    #[test]
    fn unsorted_workload_rejected() {
        let w = GainWeights::two_class_default();
        let reqs = vec![req(0, 5.0, 10, 1, Priority::LOW), req(1, 1.0, 10, 1, Priority::LOW)];
        assert!(matches!(run(&SimConfig::default(), &w, &reqs), Err(SimError::Workload(_))));
    }

    #[test]
    fn correction_tracks_drift() {
        let w = GainWeights::two_class_default();
        let reqs = busy_workload(3);
        let cfg = SimConfig {
            drift: DriftSchedule::step(5000.0, 1.3),
            correction: Some(CorrectionConfig::default()),
            ..SimConfig::default()
        };
        let res = run(&cfg, &w, &reqs).unwrap();
        let mape = windowed_mape(&res.batches, 0, 32);
        // geometric convergence: each window removes a fifth of the error
        assert!((res.instances[0].final_beta - 1.3).abs() < 0.02);
        assert!(*mape.last().unwrap() < 0.02);
        assert!(mape.windows(2).skip(8).all(|w| w[1] < w[0]));
    }

    #[test]
    fn timeline_sums_to_total_gain() {
        let w = GainWeights::two_class_default();
        let reqs = busy_workload(4);
        let res = run(&SimConfig::default(), &w, &reqs).unwrap();
        let sum: f64 = res.timeline.iter().map(|b| b.tdg).sum();
        assert!((sum - res.report.total_gain).abs() < 1e-6 * res.report.total_gain.max(1.0));
        let tokens: u64 = res.timeline.iter().map(|b| b.tokens).sum();
        assert_eq!(tokens as usize, res.records.iter().map(|r| r.emit_times.len()).sum::<usize>());
    }

    #[test]
    fn sweep_single_rate_matches_run() {
        let w = GainWeights::two_class_default();
        let mut reqs = busy_workload(5);
        let pts = sweep(&SimConfig::default(), &w, &[4.0], &reqs).unwrap();
        scale_to_rate(&mut reqs, 4.0).unwrap();
        assert_eq!(pts[0].report, run(&SimConfig::default(), &w, &reqs).unwrap().report);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in LocalPolicy::ALL {
            assert_eq!(p.name().parse::<LocalPolicy>().unwrap(), p);
        }
        for p in GlobalPolicy::ALL {
            assert_eq!(p.name().parse::<GlobalPolicy>().unwrap(), p);
        }
    }
}
