//! Frozen experiments with pass/fail predicates.
//!
//! Each scenario fixes its workload, cost model and seed, runs the
//! schedulers it compares and checks a directional predicate on the
//! measured quantities.

use std::fmt;

use serde::Serialize;

use crate::gain::{GainReport, GainWeights, Priority, SloSpec};
use crate::latmodel::LatencyModelParams;
use crate::simcore::{run, GlobalPolicy, LocalPolicy, SimConfig, SimError, Topology};
use crate::workload::{generate, scale_to_rate, two_classes, Request, SloPolicy, Source, WorkloadSpec};

pub const NAMES: [&str; 5] = [
    "overbalance_fig8",
    "edf_sjf_crossover",
    "strict_priority_starvation",
    "priority_weight_sweep",
    "weighted_vtc_fairness",
];

/// Density ordering limit of SlideBatching: every request is urgent.
pub const SJF_GAMMA: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub quantity: String,
    pub measured: f64,
    pub expected: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub passed: bool,
    pub rows: Vec<Row>,
    /// Informational measurements not covered by the predicate.
    pub notes: Vec<(String, f64)>,
}

impl ScenarioReport {
    fn new(name: &str) -> Self {
        ScenarioReport {
            name: name.to_string(),
            passed: true,
            rows: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, quantity: impl Into<String>, measured: f64, expected: impl Into<String>, ok: bool) {
        self.passed &= ok;
        self.rows.push(Row {
            quantity: quantity.into(),
            measured,
            expected: expected.into(),
            ok,
        });
    }

    fn note(&mut self, what: impl Into<String>, value: f64) {
        self.notes.push((what.into(), value));
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario {}: {}", self.name, if self.passed { "PASS" } else { "FAIL" })?;
        let width = self.rows.iter().map(|r| r.quantity.len()).max().unwrap_or(8).max(8);
        writeln!(f, "  {:width$}  {:>12}  {:24}  ok", "quantity", "measured", "expected")?;
        for r in &self.rows {
            writeln!(
                f,
                "  {:width$}  {:>12.6}  {:24}  {}",
                r.quantity,
                r.measured,
                r.expected,
                if r.ok { "yes" } else { "NO" }
            )?;
        }
        for (what, v) in &self.notes {
            writeln!(f, "  note {what} = {v}")?;
        }
        Ok(())
    }
}

fn attainment(r: &GainReport, p: Priority) -> f64 {
    r.priority(p).map_or(0.0, |s| s.slo_attainment)
}

/// Runs scenario `name`. `seed` replaces the frozen seed.
pub fn by_name(name: &str, seed: Option<u64>) -> Result<ScenarioReport, SimError> {
    match name {
        "overbalance_fig8" => overbalance_fig8(),
        "edf_sjf_crossover" => edf_sjf_crossover(seed.unwrap_or(7)),
        "strict_priority_starvation" => strict_priority_starvation(seed.unwrap_or(1)),
        "priority_weight_sweep" => priority_weight_sweep(seed.unwrap_or(1)),
        "weighted_vtc_fairness" => weighted_vtc_fairness(seed.unwrap_or(1)),
        other => Err(SimError::Config(format!(
            "unknown scenario `{other}`; expected one of {}",
            NAMES.join(", ")
        ))),
    }
}

/// Two prefill instances and one decode instance with a unit cost model:
/// a prompt of `n` tokens takes `n + 1` ms. Two background requests keep
/// the prefill instances unevenly busy when R1 (200 tokens, 800 ms TTFT)
/// and R2 (300 tokens, 600 ms TTFT) arrive. Balancing by load sends R2 to
/// the busier instance where it misses; GoRouting keeps the lighter
/// instance free for it.
pub fn overbalance_fig8_workload() -> Vec<Request> {
    let r = |id, at, input, ttft| Request {
        id,
        arrival_time: at,
        input_len: input,
        expected_output_len: 1,
        priority: Priority::LOW,
        slo: SloSpec {
            ttft_slo: ttft,
            tpot_slo: 0.0,
        },
    };
    vec![
        r(0, 0.0, 400, 5000.0),
        r(1, 1.0, 200, 5000.0),
        r(2, 2.0, 200, 800.0),
        r(3, 3.0, 300, 600.0),
    ]
}

pub fn overbalance_fig8_config(global: GlobalPolicy) -> SimConfig {
    SimConfig {
        topology: Topology::PdDisagg {
            n_prefill: 2,
            n_decode: 1,
        },
        true_params: LatencyModelParams {
            a_p: 0.0,
            b_p: 0.0,
            c_p: 1.0,
            a_d: 0.0,
            b_d: 1.0,
            t_c: 1.0,
            beta: 1.0,
        },
        global_policy: global,
        local_policy: LocalPolicy::Slide,
        horizon: 10_000.0,
        audit: true,
        ..SimConfig::default()
    }
}

pub fn overbalance_fig8() -> Result<ScenarioReport, SimError> {
    let reqs = overbalance_fig8_workload();
    let w = GainWeights::new(1.0, 1.0, [(Priority::LOW, 1.0)])?;
    let go = run(&overbalance_fig8_config(GlobalPolicy::GoRouting), &w, &reqs)?;
    let ml = run(&overbalance_fig8_config(GlobalPolicy::MinLoad), &w, &reqs)?;
    let ttft = |res: &crate::simcore::SimResult, k: usize| res.records[k].ttft().unwrap_or(f64::INFINITY);
    let mut rep = ScenarioReport::new("overbalance_fig8");
    for (label, res) in [("go_routing", &go), ("min_load", &ml)] {
        for (k, name) in [(2, "R1"), (3, "R2")] {
            let t = ttft(res, k);
            let slo = reqs[k].slo.ttft_slo;
            let expect_met = !(label == "min_load" && name == "R2");
            rep.check(
                format!("{label} {name} ttft"),
                t,
                if expect_met { format!("< {slo}") } else { format!(">= {slo}") },
                (t < slo) == expect_met,
            );
        }
    }
    rep.check(
        "tdg go_routing - min_load",
        go.report.total_gain - ml.report.total_gain,
        "> 0",
        go.report.total_gain > ml.report.total_gain,
    );
    Ok(rep)
}

/// Rates of the crossover sweep (req/s).
pub const CROSSOVER_RATES: [f64; 8] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0];

/// Poisson template for the crossover sweep. TTFT targets grow with the
/// prompt at little more than its prefill cost, so serving order matters
/// before the instance saturates.
pub fn crossover_template(seed: u64) -> (WorkloadSpec, Vec<Request>) {
    let mut spec = WorkloadSpec::poisson_default(1.0, 1_000_000.0, seed);
    spec.slo = SloPolicy::PerLength {
        ttft_base: 100.0,
        ttft_per_token: 0.08,
        tpot: 200.0,
    };
    if let Source::Poisson { max_input, .. } = &mut spec.source {
        *max_input = 4096;
    }
    let reqs = generate(&spec).expect("frozen workload is valid");
    (spec, reqs)
}

/// EDF-style (SlideBatching with gamma 0, all requests normal) against
/// SJF-style (gamma unbounded, all requests urgent and density ordered).
pub fn edf_sjf_crossover(seed: u64) -> Result<ScenarioReport, SimError> {
    let (spec, template) = crossover_template(seed);
    let w = spec.gain_weights(None, &template)?;
    let mut rep = ScenarioReport::new("edf_sjf_crossover");
    let mut diffs = Vec::new();
    for rate in CROSSOVER_RATES {
        let mut reqs = template.clone();
        scale_to_rate(&mut reqs, rate).map_err(|e| SimError::Workload(e.to_string()))?;
        let mut att = [0.0; 2];
        for (k, gamma) in [0.0, SJF_GAMMA].into_iter().enumerate() {
            let mut cfg = SimConfig {
                horizon: 1e9,
                ..SimConfig::default()
            };
            cfg.slide.gamma = gamma;
            att[k] = run(&cfg, &w, &reqs)?.report.slo_attainment;
        }
        rep.note(format!("rate {rate} edf"), att[0]);
        rep.note(format!("rate {rate} sjf"), att[1]);
        diffs.push(att[0] - att[1]);
    }
    let (first, last) = (diffs[0], diffs[diffs.len() - 1]);
    rep.check(format!("edf - sjf at rate {}", CROSSOVER_RATES[0]), first, ">= 0", first >= 0.0);
    rep.check(
        format!("edf - sjf at rate {}", CROSSOVER_RATES[CROSSOVER_RATES.len() - 1]),
        last,
        "<= 0",
        last <= 0.0,
    );
    // a rate where EDF is strictly ahead followed by one where it is behind
    let cross = diffs
        .iter()
        .position(|d| *d > 0.0)
        .and_then(|k| diffs[k..].iter().position(|d| *d < 0.0).map(|j| k + j));
    rep.check(
        "crossover rate",
        cross.map_or(f64::NAN, |k| CROSSOVER_RATES[k]),
        "edf ahead, then behind",
        cross.is_some(),
    );
    Ok(rep)
}

/// Saturating single-instance workload with weights 2:1.
pub fn saturating_workload(seed: u64, rate: f64, duration: f64, high_weight: f64) -> WorkloadSpec {
    let mut spec = WorkloadSpec::poisson_default(rate, duration, seed);
    spec.classes = two_classes(high_weight);
    spec.slo = SloPolicy::Fixed {
        ttft: 3000.0,
        tpot: 100.0,
    };
    spec
}

pub fn strict_priority_starvation(seed: u64) -> Result<ScenarioReport, SimError> {
    let spec = saturating_workload(seed, 6.0, 300_000.0, 2.0);
    let reqs = generate(&spec).expect("frozen workload is valid");
    let w = spec.gain_weights(None, &reqs)?;
    let mut reports = Vec::new();
    for local in LocalPolicy::ALL {
        let cfg = SimConfig {
            horizon: 1e9,
            local_policy: local,
            ..SimConfig::default()
        };
        reports.push((local, run(&cfg, &w, &reqs)?.report));
    }
    let slide = &reports[0].1;
    let strict = &reports
        .iter()
        .find(|(p, _)| *p == LocalPolicy::SarathiPriority)
        .expect("listed policy")
        .1;
    let mut rep = ScenarioReport::new("strict_priority_starvation");
    let (hi, lo) = (attainment(slide, Priority::HIGH), attainment(slide, Priority::LOW));
    rep.check("slide high - low attainment", hi - lo, ">= 0", hi >= lo);
    let strict_lo = attainment(strict, Priority::LOW);
    rep.check("sarathi_priority low - slide low", strict_lo - lo, "< 0", strict_lo < lo);
    for (p, r) in &reports[1..] {
        rep.check(
            format!("slide tdg_ratio - {}", p.name()),
            slide.tdg_ratio - r.tdg_ratio,
            ">= 0",
            slide.tdg_ratio >= r.tdg_ratio,
        );
    }
    for (p, r) in &reports {
        rep.note(format!("{} tdg_ratio", p.name()), r.tdg_ratio);
        rep.note(format!("{} high attainment", p.name()), attainment(r, Priority::HIGH));
        rep.note(format!("{} low attainment", p.name()), attainment(r, Priority::LOW));
    }
    Ok(rep)
}

pub const WEIGHT_SWEEP: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

pub fn priority_weight_sweep(seed: u64) -> Result<ScenarioReport, SimError> {
    let mut rep = ScenarioReport::new("priority_weight_sweep");
    let mut rows = Vec::new();
    for hw in WEIGHT_SWEEP {
        let spec = saturating_workload(seed, 7.0, 1_200_000.0, hw);
        let reqs = generate(&spec).expect("frozen workload is valid");
        let w = spec.gain_weights(None, &reqs)?;
        let cfg = SimConfig {
            horizon: 1e9,
            ..SimConfig::default()
        };
        let r = run(&cfg, &w, &reqs)?.report;
        rows.push((hw, attainment(&r, Priority::HIGH), r.slo_attainment));
    }
    for pair in rows.windows(2) {
        let ((w0, h0, _), (w1, h1, _)) = (pair[0], pair[1]);
        rep.check(format!("high attainment w{w1} - w{w0}"), h1 - h0, ">= 0", h1 >= h0);
    }
    let base = rows.iter().find(|r| r.0 == 2.0).expect("weight 2 swept").2;
    for (hw, _, overall) in &rows {
        rep.check(
            format!("overall attainment w{hw} - w2"),
            overall - base,
            "within +-0.10",
            (overall - base).abs() <= 0.10,
        );
    }
    Ok(rep)
}

/// Both classes stay backlogged until the horizon.
pub fn weighted_vtc_fairness(seed: u64) -> Result<ScenarioReport, SimError> {
    let spec = saturating_workload(seed, 12.0, 120_000.0, 2.0);
    let reqs = generate(&spec).expect("frozen workload is valid");
    let w = spec.gain_weights(None, &reqs)?;
    let cfg = SimConfig {
        horizon: 120_000.0,
        local_policy: LocalPolicy::WeightedVtc,
        ..SimConfig::default()
    };
    let res = run(&cfg, &w, &reqs)?;
    let served = |p| res.served_tokens.get(&p).copied().unwrap_or(0) as f64;
    let ratio = served(Priority::HIGH) / served(Priority::LOW);
    let mut rep = ScenarioReport::new("weighted_vtc_fairness");
    rep.check(
        "served tokens high / low",
        ratio,
        "2 within 10%",
        (ratio / 2.0 - 1.0).abs() <= 0.10,
    );
    rep.note("utilization", res.instances[0].utilization);
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overbalance_frozen_numbers() {
        let reqs = overbalance_fig8_workload();
        let w = GainWeights::new(1.0, 1.0, [(Priority::LOW, 1.0)]).unwrap();
        let go = run(&overbalance_fig8_config(GlobalPolicy::GoRouting), &w, &reqs).unwrap();
        let ml = run(&overbalance_fig8_config(GlobalPolicy::MinLoad), &w, &reqs).unwrap();
        let ttfts = |r: &crate::simcore::SimResult| r.records.iter().map(|x| x.ttft().unwrap()).collect::<Vec<_>>();
        // each pass over n prompt tokens runs n + 1 ms
        assert_eq!(ttfts(&go), vec![401.0, 201.0, 600.0, 500.0]);
        // R2 waits behind the 400-token prompt until 401 with 202 ms left:
        // a 192-token chunk, six 16-token chunks once late, then the last 12
        assert_eq!(ttfts(&ml), vec![401.0, 201.0, 401.0, 706.0]);
        assert_eq!(go.report.total_gain, 4.0);
        assert_eq!(ml.report.total_gain, 3.0);
        assert!(overbalance_fig8().unwrap().passed);
    }

    #[test]
    fn unknown_scenario() {
        assert!(by_name("nope", None).is_err());
    }
}
