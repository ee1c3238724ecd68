//! Baseline batch schedulers with fixed token or sequence capacity.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{annotate, BatchEntry, BatchPlan, MemoryBudget, SchedError, SchedRequest};
use crate::gain::{GainWeights, Priority};
use crate::latmodel::{LatencyModelParams, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselinePolicy {
    /// Prefill first, FCFS, whole prompts.
    VllmFcfs,
    /// Decode first, FCFS within each phase, chunked prefill.
    SarathiFcfs,
    /// Decode first, then higher priority, then earlier arrival.
    SarathiPriority,
    /// Decodes close to their deadline, then prefills, then other decodes.
    FairBatching,
    /// Lowest weighted virtual token counter first.
    WeightedVtc,
}

impl BaselinePolicy {
    pub const ALL: [BaselinePolicy; 5] = [
        BaselinePolicy::VllmFcfs,
        BaselinePolicy::SarathiFcfs,
        BaselinePolicy::SarathiPriority,
        BaselinePolicy::FairBatching,
        BaselinePolicy::WeightedVtc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselinePolicy::VllmFcfs => "vllm_fcfs",
            BaselinePolicy::SarathiFcfs => "sarathi_fcfs",
            BaselinePolicy::SarathiPriority => "sarathi_priority",
            BaselinePolicy::FairBatching => "fairbatching",
            BaselinePolicy::WeightedVtc => "weighted_vtc",
        }
    }
}

impl FromStr for BaselinePolicy {
    type Err = SchedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BaselinePolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| SchedError::UnknownPolicy(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Tokens per batch for the chunked-prefill policies.
    pub token_budget: u32,
    /// Tokens per batch for `vllm_fcfs`.
    pub vllm_max_tokens: u32,
    pub max_num_seqs: usize,
    /// A decode is "near its deadline" for `fairbatching` when its remaining
    /// time is below this many TPOT targets.
    pub fair_slack_tpots: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            token_budget: 512,
            vllm_max_tokens: 4096,
            max_num_seqs: 256,
            fair_slack_tpots: 1.0,
        }
    }
}

/// Per-client virtual token counters for weighted VTC. Clients are
/// priority classes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VtcState {
    pub counters: BTreeMap<Priority, f64>,
    #[serde(skip)]
    active: BTreeSet<Priority>,
}

impl VtcState {
    pub fn counter(&self, p: Priority) -> f64 {
        self.counters.get(&p).copied().unwrap_or(0.0)
    }

    /// Clients becoming backlogged are lifted to the smallest counter among
    /// clients that already were, so idle periods do not bank credit.
    fn refresh_active(&mut self, now_active: &BTreeSet<Priority>) {
        let floor = self
            .active
            .iter()
            .filter(|p| now_active.contains(p))
            .map(|p| self.counter(*p))
            .fold(f64::INFINITY, f64::min);
        if floor.is_finite() {
            for p in now_active.difference(&self.active) {
                let c = self.counters.entry(*p).or_insert(0.0);
                *c = c.max(floor);
            }
        }
        self.active = now_active.clone();
    }
}

/// Token- and sequence-capped batch filler shared by the ordered baselines.
struct Filler<'a> {
    params: &'a LatencyModelParams,
    mem: &'a MemoryBudget,
    token_cap: u32,
    seq_cap: usize,
    tokens: u32,
    used_blocks: u32,
    entries: Vec<BatchEntry>,
}

impl<'a> Filler<'a> {
    fn new(params: &'a LatencyModelParams, mem: &'a MemoryBudget, token_cap: u32, seq_cap: usize) -> Self {
        Filler {
            params,
            mem,
            token_cap,
            seq_cap,
            tokens: 0,
            used_blocks: 0,
            entries: Vec::new(),
        }
    }

    fn full(&self) -> bool {
        self.tokens >= self.token_cap || self.entries.len() >= self.seq_cap
    }

    /// Admits `r` with up to the remaining token capacity. Prefills that may
    /// not be split are admitted only whole, except as the first entry.
    fn offer(&mut self, r: &SchedRequest, chunked: bool) -> u32 {
        if self.full() {
            return 0;
        }
        let need = self.mem.blocks_needed(r);
        if !self.mem.fits(r, need, self.used_blocks) {
            return 0;
        }
        let left = self.token_cap - self.tokens;
        let chunk = match r.phase() {
            Phase::Decode => 1,
            Phase::Prefill => {
                let rest = r.remaining_prompt();
                if rest <= left {
                    rest
                } else if chunked {
                    left
                } else if self.entries.is_empty() {
                    rest
                } else {
                    0
                }
            }
        };
        if chunk == 0 {
            return 0;
        }
        let t = self.params.estimate_item(&r.work_item(chunk));
        self.tokens = self.tokens.saturating_add(chunk);
        self.used_blocks += need;
        self.entries.push(BatchEntry {
            id: r.id,
            phase: r.phase(),
            chunk_len: chunk,
            est_time: t,
            new_blocks: need,
        });
        chunk
    }

    fn finish(self) -> BatchPlan {
        let est_time = self.entries.iter().map(|e| e.est_time).sum::<f64>() + self.params.overhead();
        BatchPlan {
            entries: self.entries,
            est_time,
            budget: est_time,
            urgent: 0,
            normal: 0,
        }
    }
}

fn fcfs(a: &SchedRequest, b: &SchedRequest) -> std::cmp::Ordering {
    a.tie_cmp(b)
}

/// Forms one batch under a baseline policy. `queue` is annotated in place
/// (baselines that order by deadline use `remain`).
#[allow(clippy::too_many_arguments)]
pub fn baseline_batch(
    policy: BaselinePolicy,
    queue: &mut [SchedRequest],
    params: &LatencyModelParams,
    weights: &GainWeights,
    cfg: &BaselineConfig,
    now: f64,
    mem: &MemoryBudget,
    vtc: &mut VtcState,
) -> Result<BatchPlan, SchedError> {
    annotate(queue, params, weights, now)?;
    let is_decode = |r: &SchedRequest| r.phase() == Phase::Decode;
    let mut idx: Vec<usize> = (0..queue.len()).collect();
    let q = &*queue;
    let plan = match policy {
        BaselinePolicy::VllmFcfs => {
            idx.sort_by(|&a, &b| {
                is_decode(&q[a])
                    .cmp(&is_decode(&q[b]))
                    .then_with(|| fcfs(&q[a], &q[b]))
            });
            let mut f = Filler::new(params, mem, cfg.vllm_max_tokens, cfg.max_num_seqs);
            for i in idx {
                f.offer(&q[i], false);
            }
            f.finish()
        }
        BaselinePolicy::SarathiFcfs | BaselinePolicy::SarathiPriority => {
            let by_priority = policy == BaselinePolicy::SarathiPriority;
            idx.sort_by(|&a, &b| {
                let (ra, rb) = (&q[a], &q[b]);
                is_decode(rb)
                    .cmp(&is_decode(ra))
                    .then_with(|| {
                        if by_priority {
                            rb.priority.cmp(&ra.priority)
                        } else {
                            std::cmp::Ordering::Equal
                        }
                    })
                    .then_with(|| fcfs(ra, rb))
            });
            let mut f = Filler::new(params, mem, cfg.token_budget, cfg.max_num_seqs);
            for i in idx {
                f.offer(&q[i], true);
            }
            f.finish()
        }
        BaselinePolicy::FairBatching => {
            let group = |r: &SchedRequest| -> u8 {
                match r.phase() {
                    Phase::Decode if r.remain < cfg.fair_slack_tpots * r.slo.tpot_slo => 0,
                    Phase::Prefill => 1,
                    Phase::Decode => 2,
                }
            };
            idx.sort_by(|&a, &b| {
                let (ra, rb) = (&q[a], &q[b]);
                group(ra)
                    .cmp(&group(rb))
                    .then_with(|| ra.remain.total_cmp(&rb.remain))
                    .then_with(|| fcfs(ra, rb))
            });
            let mut f = Filler::new(params, mem, cfg.token_budget, cfg.max_num_seqs);
            for i in idx {
                f.offer(&q[i], true);
            }
            f.finish()
        }
        BaselinePolicy::WeightedVtc => vtc_batch(q, params, weights, cfg, mem, vtc)?,
    };
    Ok(plan)
}

fn vtc_batch(
    q: &[SchedRequest],
    params: &LatencyModelParams,
    weights: &GainWeights,
    cfg: &BaselineConfig,
    mem: &MemoryBudget,
    vtc: &mut VtcState,
) -> Result<BatchPlan, SchedError> {
    let mut per_client: BTreeMap<Priority, Vec<usize>> = BTreeMap::new();
    for (i, r) in q.iter().enumerate() {
        per_client.entry(r.priority).or_default().push(i);
    }
    for list in per_client.values_mut() {
        list.sort_by(|&a, &b| fcfs(&q[a], &q[b]));
        list.reverse();
    }
    let active: BTreeSet<Priority> = per_client.keys().copied().collect();
    vtc.refresh_active(&active);

    let mut f = Filler::new(params, mem, cfg.token_budget, cfg.max_num_seqs);
    while !f.full() {
        let Some((&client, _)) = per_client
            .iter()
            .filter(|(_, l)| !l.is_empty())
            .min_by(|(pa, _), (pb, _)| {
                vtc.counter(**pa)
                    .total_cmp(&vtc.counter(**pb))
                    .then_with(|| pb.cmp(pa))
            })
        else {
            break;
        };
        let i = per_client
            .get_mut(&client)
            .and_then(|l| l.pop())
            .expect("client list nonempty");
        let served = f.offer(&q[i], true);
        if served > 0 {
            let w = weights.priority_weight(client)?;
            *vtc.counters.entry(client).or_insert(0.0) += f64::from(served) / w;
        }
    }
    Ok(f.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gain::SloSpec;

    fn params() -> LatencyModelParams {
        LatencyModelParams {
            a_p: 0.0,
            b_p: 0.0,
            c_p: 0.1,
            a_d: 0.0,
            b_d: 1.0,
            t_c: 2.0,
            beta: 1.0,
        }
    }

    fn req(id: u64, arrival: f64, priority: Priority, input: u32, decoding: bool) -> SchedRequest {
        let mut r = SchedRequest::new(id, arrival, priority, SloSpec::new(1000.0, 50.0).unwrap(), input);
        if decoding {
            r.prefill_done = input;
            r.output_len = 1;
            r.kv_len = input + 1;
        }
        r
    }

    fn run(policy: BaselinePolicy, q: &mut [SchedRequest], cfg: &BaselineConfig) -> BatchPlan {
        baseline_batch(
            policy,
            q,
            &params(),
            &GainWeights::two_class_default(),
            cfg,
            10.0,
            &MemoryBudget::unlimited(),
            &mut VtcState::default(),
        )
        .unwrap()
    }

    #[test]
    fn policy_names_parse() {
        for p in BaselinePolicy::ALL {
            assert_eq!(p.name().parse::<BaselinePolicy>().unwrap(), p);
        }
        assert!(matches!(
            "sjf".parse::<BaselinePolicy>(),
            Err(SchedError::UnknownPolicy(_))
        ));
    }

    #[test]
    fn vllm_fcfs_orders_by_arrival() {
        let mut q = vec![req(1, 1.0, Priority::LOW, 10, false), req(0, 0.0, Priority::LOW, 10, false)];
        assert_eq!(run(BaselinePolicy::VllmFcfs, &mut q, &BaselineConfig::default()).ids(), vec![0, 1]);
    }

    #[test]
    fn vllm_fcfs_puts_prefill_first_and_keeps_prompts_whole() {
        let mut q = vec![
            req(0, 0.0, Priority::LOW, 10, true),
            req(1, 1.0, Priority::LOW, 300, false),
            req(2, 2.0, Priority::LOW, 300, false),
        ];
        let cfg = BaselineConfig {
            vllm_max_tokens: 400,
            ..BaselineConfig::default()
        };
        let plan = run(BaselinePolicy::VllmFcfs, &mut q, &cfg);
        assert_eq!(plan.ids(), vec![1, 0]);
        assert_eq!(plan.entries[0].chunk_len, 300);
    }

    #[test]
    fn sarathi_priority_strict_order() {
        let mut q = vec![
            req(0, 0.0, Priority::LOW, 10, false),
            req(1, 5.0, Priority::HIGH, 10, false),
            req(2, 8.0, Priority::LOW, 10, true),
        ];
        assert_eq!(run(BaselinePolicy::SarathiPriority, &mut q, &BaselineConfig::default()).ids(), vec![2, 1, 0]);
        let mut q2 = q.clone();
        assert_eq!(run(BaselinePolicy::SarathiFcfs, &mut q2, &BaselineConfig::default()).ids(), vec![2, 0, 1]);
    }

    #[test]
    fn sarathi_chunks_to_token_budget() {
        let mut q = vec![
            req(0, 0.0, Priority::LOW, 10, true),
            req(1, 1.0, Priority::LOW, 1000, false),
            req(2, 2.0, Priority::LOW, 1000, false),
        ];
        let plan = run(BaselinePolicy::SarathiFcfs, &mut q, &BaselineConfig::default());
        assert_eq!(plan.ids(), vec![0, 1]);
        assert_eq!(plan.entries[1].chunk_len, 511);
        assert!((plan.est_time - (1.0 + 51.1 + 2.0)).abs() < 1e-9);
    }

    #[test]
    fn fairbatching_groups() {
        let mut near = req(0, 0.0, Priority::LOW, 10, true);
        near.slo = SloSpec::new(5.0, 50.0).unwrap();
        let far = req(1, 0.0, Priority::LOW, 10, true);
        let pre = req(2, 0.0, Priority::LOW, 10, false);
        let mut q = vec![far, pre, near];
        assert_eq!(run(BaselinePolicy::FairBatching, &mut q, &BaselineConfig::default()).ids(), vec![0, 2, 1]);
    }

    #[test]
    fn vtc_serves_lowest_counter_first() {
        let mut q = vec![
            req(0, 0.0, Priority::LOW, 10, true),
            req(1, 1.0, Priority::HIGH, 10, true),
        ];
        let mut vtc = VtcState::default();
        vtc.counters.insert(Priority::HIGH, 5.0);
        vtc.counters.insert(Priority::LOW, 1.0);
        vtc.active = [Priority::LOW, Priority::HIGH].into_iter().collect();
        let cfg = BaselineConfig {
            max_num_seqs: 1,
            ..BaselineConfig::default()
        };
        let plan = baseline_batch(
            BaselinePolicy::WeightedVtc,
            &mut q,
            &params(),
            &GainWeights::two_class_default(),
            &cfg,
            0.0,
            &MemoryBudget::unlimited(),
            &mut vtc,
        )
        .unwrap();
        assert_eq!(plan.ids(), vec![0]);
        assert_eq!(vtc.counter(Priority::LOW), 2.0);
    }

    /// Long-run saturation: repeatedly batch from two always-backlogged
    /// clients and compare served tokens with the 2:1 weight ratio.
    #[test]
    fn vtc_long_run_ratio() {
        let mut q: Vec<SchedRequest> = (0..400)
            .map(|id| {
                let p = if id % 2 == 0 { Priority::HIGH } else { Priority::LOW };
                req(id, id as f64, p, 64 + (id as u32 * 37) % 300, false)
            })
            .collect();
        let mut vtc = VtcState::default();
        let mut served: BTreeMap<Priority, u64> = BTreeMap::new();
        let w = GainWeights::two_class_default();
        let cfg = BaselineConfig::default();
        for step in 0..200 {
            let plan = baseline_batch(
                BaselinePolicy::WeightedVtc,
                &mut q,
                &params(),
                &w,
                &cfg,
                step as f64,
                &MemoryBudget::unlimited(),
                &mut vtc,
            )
            .unwrap();
            for e in &plan.entries {
                let r = q.iter_mut().find(|r| r.id == e.id).unwrap();
                *served.entry(r.priority).or_default() += u64::from(e.chunk_len);
                if r.phase() == Phase::Prefill {
                    r.prefill_done += e.chunk_len;
                    r.kv_len += e.chunk_len;
                    if r.prefill_done == r.input_len {
                        r.output_len = 1;
                    }
                } else {
                    r.output_len += 1;
                    r.kv_len += 1;
                }
            }
        }
        let ratio = served[&Priority::HIGH] as f64 / served[&Priority::LOW] as f64;
        assert!((ratio / 2.0 - 1.0).abs() < 0.10, "ratio {ratio}");
    }
}
