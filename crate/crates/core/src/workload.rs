//! Request workloads: Poisson generation, trace replay and rate scaling.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gain::{GainError, GainWeights, Priority, SloSpec};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Spec(String),
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trace {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Gain(#[from] GainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival_time: f64,
    pub input_len: u32,
    pub expected_output_len: u32,
    pub priority: Priority,
    pub slo: SloSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDist {
    Fixed { value: u32 },
    Uniform { low: u32, high: u32 },
    /// Log-normal with the given median and log-space standard deviation.
    LogNormal { median: f64, sigma: f64 },
}

impl LengthDist {
    fn validate(&self, what: &str) -> Result<(), WorkloadError> {
        let ok = match *self {
            LengthDist::Fixed { value } => value >= 1,
            LengthDist::Uniform { low, high } => low >= 1 && low <= high,
            LengthDist::LogNormal { median, sigma } => median >= 1.0 && sigma >= 0.0 && sigma.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(WorkloadError::Spec(format!("{what}: bad length distribution {self:?}")))
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, max: u32) -> u32 {
        let v = match *self {
            LengthDist::Fixed { value } => value,
            LengthDist::Uniform { low, high } => rng.random_range(low..=high),
            LengthDist::LogNormal { median, sigma } => {
                let d = LogNormal::new(median.ln(), sigma).expect("validated");
                let x: f64 = d.sample(rng);
                x.round().clamp(1.0, f64::from(u32::MAX)) as u32
            }
        };
        v.clamp(1, max.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Poisson {
        /// Requests per second.
        rate: f64,
        /// Arrival window in ms.
        duration: f64,
        input: LengthDist,
        output: LengthDist,
        #[serde(default = "default_max_input")]
        max_input: u32,
        #[serde(default = "default_max_output")]
        max_output: u32,
    },
    Trace {
        path: PathBuf,
        /// Overall rate in requests per second; `None` keeps the trace timing.
        #[serde(default)]
        target_rate: Option<f64>,
    },
}

fn default_max_input() -> u32 {
    8192
}

fn default_max_output() -> u32 {
    2048
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorityClass {
    pub level: Priority,
    pub fraction: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SloPolicy {
    Fixed { ttft: f64, tpot: f64 },
    /// TTFT grows linearly with the prompt length.
    PerLength { ttft_base: f64, ttft_per_token: f64, tpot: f64 },
}

impl Default for SloPolicy {
    fn default() -> Self {
        SloPolicy::Fixed {
            ttft: 3000.0,
            tpot: 100.0,
        }
    }
}

impl SloPolicy {
    pub fn slo_for(&self, input_len: u32) -> SloSpec {
        match *self {
            SloPolicy::Fixed { ttft, tpot } => SloSpec {
                ttft_slo: ttft,
                tpot_slo: tpot,
            },
            SloPolicy::PerLength {
                ttft_base,
                ttft_per_token,
                tpot,
            } => SloSpec {
                ttft_slo: ttft_base + ttft_per_token * f64::from(input_len),
                tpot_slo: tpot,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub source: Source,
    pub classes: Vec<PriorityClass>,
    #[serde(default)]
    pub slo: SloPolicy,
    #[serde(default)]
    pub seed: u64,
}

impl WorkloadSpec {
    /// Poisson arrivals with the default length distributions and two
    /// equally likely classes weighted 2:1.
    pub fn poisson_default(rate: f64, duration: f64, seed: u64) -> Self {
        WorkloadSpec {
            source: Source::Poisson {
                rate,
                duration,
                input: LengthDist::LogNormal {
                    median: 512.0,
                    sigma: 1.0,
                },
                output: LengthDist::LogNormal {
                    median: 128.0,
                    sigma: 1.0,
                },
                max_input: default_max_input(),
                max_output: default_max_output(),
            },
            classes: two_classes(2.0),
            slo: SloPolicy::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.classes.is_empty() {
            return Err(WorkloadError::Spec("no priority classes".into()));
        }
        let mut levels = BTreeSet::new();
        let mut total = 0.0;
        for c in &self.classes {
            if !levels.insert(c.level) {
                return Err(WorkloadError::Spec(format!("priority {} listed twice", c.level)));
            }
            if !(c.fraction >= 0.0 && c.fraction.is_finite()) {
                return Err(WorkloadError::Spec(format!("priority {} fraction {}", c.level, c.fraction)));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(WorkloadError::Spec(format!("priority {} weight {}", c.level, c.weight)));
            }
            total += c.fraction;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(WorkloadError::Spec(format!("priority fractions sum to {total}")));
        }
        match self.slo {
            SloPolicy::Fixed { ttft, tpot } => SloSpec::new(ttft, tpot).map(|_| ())?,
            SloPolicy::PerLength {
                ttft_base,
                ttft_per_token,
                tpot,
            } => {
                if ttft_per_token < 0.0 {
                    return Err(WorkloadError::Spec("ttft_per_token must be nonnegative".into()));
                }
                SloSpec::new(ttft_base, tpot).map(|_| ())?
            }
        }
        if let Source::Poisson {
            rate,
            duration,
            input,
            output,
            ..
        } = &self.source
        {
            if !(*rate > 0.0 && rate.is_finite()) {
                return Err(WorkloadError::Spec(format!("rate must be positive, got {rate}")));
            }
            if !(*duration > 0.0 && duration.is_finite()) {
                return Err(WorkloadError::Spec(format!("duration must be positive, got {duration}")));
            }
            input.validate("input")?;
            output.validate("output")?;
        }
        if let Source::Trace {
            target_rate: Some(r),
            ..
        } = &self.source
        {
            if !(*r > 0.0 && r.is_finite()) {
                return Err(WorkloadError::Spec(format!("target_rate must be positive, got {r}")));
            }
        }
        Ok(())
    }

    /// Gain weights for this workload. `w_first` defaults to the mean
    /// input/output length ratio of `requests`.
    pub fn gain_weights(&self, w_first: Option<f64>, requests: &[Request]) -> Result<GainWeights, GainError> {
        let w_first = w_first.unwrap_or_else(|| {
            GainWeights::first_weight_from_lengths(
                requests.iter().map(|r| (r.input_len, r.expected_output_len)),
            )
        });
        GainWeights::new(w_first, 1.0, self.classes.iter().map(|c| (c.level, c.weight)))
    }

    fn sample_priority(&self, rng: &mut ChaCha8Rng) -> Priority {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for c in &self.classes {
            acc += c.fraction;
            if u < acc {
                return c.level;
            }
        }
        self.classes
            .iter()
            .rev()
            .find(|c| c.fraction > 0.0)
            .unwrap_or(&self.classes[0])
            .level
    }
}

/// High and low classes, each with probability 1/2.
pub fn two_classes(high_weight: f64) -> Vec<PriorityClass> {
    vec![
        PriorityClass {
            level: Priority::HIGH,
            fraction: 0.5,
            weight: high_weight,
        },
        PriorityClass {
            level: Priority::LOW,
            fraction: 0.5,
            weight: 1.0,
        },
    ]
}

/// Builds the request list of `spec`, sorted by arrival time.
pub fn generate(spec: &WorkloadSpec) -> Result<Vec<Request>, WorkloadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match &spec.source {
        Source::Poisson {
            rate,
            duration,
            input,
            output,
            max_input,
            max_output,
        } => {
            let gap = Exp::new(rate / 1000.0).expect("validated rate");
            let mut out = Vec::new();
            let mut t = 0.0;
            loop {
                t += gap.sample(&mut rng);
                if t >= *duration {
                    break;
                }
                let input_len = input.sample(&mut rng, *max_input);
                let expected_output_len = output.sample(&mut rng, *max_output);
                let priority = spec.sample_priority(&mut rng);
                out.push(Request {
                    id: out.len() as u64,
                    arrival_time: t,
                    input_len,
                    expected_output_len,
                    priority,
                    slo: spec.slo.slo_for(input_len),
                });
            }
            Ok(out)
        }
        Source::Trace { path, target_rate } => {
            let file = std::fs::File::open(path).map_err(|source| WorkloadError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let records = read_trace(std::io::BufReader::new(file))?;
            let mut reqs = from_trace(&records, spec, &mut rng)?;
            if let Some(r) = target_rate {
                scale_to_rate(&mut reqs, *r)?;
            }
            Ok(reqs)
        }
    }
}

/// One line of a JSONL trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub timestamp_ms: f64,
    pub input_len: u32,
    pub output_len: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority: Option<Priority>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_id: Option<String>,
}

pub fn read_trace(reader: impl BufRead) -> Result<Vec<TraceRecord>, WorkloadError> {
    let mut out: Vec<TraceRecord> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| WorkloadError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| WorkloadError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let bad = |msg: &str| WorkloadError::Parse {
            line: line_no,
            msg: msg.to_string(),
        };
        if !(rec.timestamp_ms.is_finite() && rec.timestamp_ms >= 0.0) {
            return Err(bad("timestamp_ms must be a nonnegative number"));
        }
        if rec.input_len == 0 || rec.output_len == 0 {
            return Err(bad("input_len and output_len must be at least 1"));
        }
        if out.last().is_some_and(|p| p.timestamp_ms > rec.timestamp_ms) {
            return Err(bad("timestamps must be nondecreasing"));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_trace(mut w: impl Write, records: &[TraceRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn from_trace(
    records: &[TraceRecord],
    spec: &WorkloadSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Request>, WorkloadError> {
    let known: BTreeSet<Priority> = spec.classes.iter().map(|c| c.level).collect();
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let priority = match r.priority {
                Some(p) if known.contains(&p) => p,
                Some(p) => {
                    return Err(WorkloadError::Parse {
                        line: i + 1,
                        msg: format!("priority {p} has no configured class"),
                    })
                }
                None => spec.sample_priority(rng),
            };
            Ok(Request {
                id: i as u64,
                arrival_time: r.timestamp_ms,
                input_len: r.input_len,
                expected_output_len: r.output_len,
                priority,
                slo: spec.slo.slo_for(r.input_len),
            })
        })
        .collect()
}

/// Overall rate in requests per second: count over the first-to-last span.
pub fn overall_rate(reqs: &[Request]) -> Option<f64> {
    let (first, last) = (reqs.first()?, reqs.last()?);
    let span = last.arrival_time - first.arrival_time;
    (span > 0.0).then(|| reqs.len() as f64 / span * 1000.0)
}

/// Shifts arrivals to start at 0 and stretches them so that
/// [`overall_rate`] equals `target_rate`.
pub fn scale_to_rate(reqs: &mut [Request], target_rate: f64) -> Result<(), WorkloadError> {
    if !(target_rate > 0.0 && target_rate.is_finite()) {
        return Err(WorkloadError::Spec(format!("target rate must be positive, got {target_rate}")));
    }
    let Some(t0) = reqs.first().map(|r| r.arrival_time) else {
        return Ok(());
    };
    let factor = match overall_rate(reqs) {
        Some(rate) => rate / target_rate,
        None => 1.0,
    };
    for r in reqs.iter_mut() {
        r.arrival_time = (r.arrival_time - t0) * factor;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rate: f64, duration: f64, seed: u64) -> WorkloadSpec {
        WorkloadSpec::poisson_default(rate, duration, seed)
    }

    #[test]
    fn poisson_count_concentrates() {
        for seed in 0..20 {
            let (r, d) = (50.0, 60_000.0);
            let n = generate(&spec(r, d, seed)).unwrap().len() as f64;
            let mean = r * d / 1000.0;
            assert!((n - mean).abs() <= 3.0 * mean.sqrt(), "seed {seed}: {n}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_sorted() {
        let a = generate(&spec(20.0, 10_000.0, 5)).unwrap();
        assert_eq!(a, generate(&spec(20.0, 10_000.0, 5)).unwrap());
        assert_ne!(a, generate(&spec(20.0, 10_000.0, 6)).unwrap());
        assert!(a.windows(2).all(|w| w[0].arrival_time <= w[1].arrival_time));
        assert!(a.iter().all(|r| r.input_len >= 1 && r.expected_output_len >= 1));
    }

    #[test]
    fn single_class_fraction() {
        let mut s = spec(20.0, 5_000.0, 1);
        s.classes = vec![PriorityClass {
            level: Priority::HIGH,
            fraction: 1.0,
            weight: 2.0,
        }];
        assert!(generate(&s).unwrap().iter().all(|r| r.priority == Priority::HIGH));
    }

    #[test]
    fn priority_marginals_chi_square() {
        let mut s = spec(1000.0, 10_000.0, 3);
        s.classes = vec![
            PriorityClass { level: Priority(0), fraction: 0.5, weight: 1.0 },
            PriorityClass { level: Priority(1), fraction: 0.3, weight: 2.0 },
            PriorityClass { level: Priority(2), fraction: 0.2, weight: 4.0 },
        ];
        let reqs = generate(&s).unwrap();
        let n = reqs.len() as f64;
        assert!(n > 9000.0);
        let chi2: f64 = s
            .classes
            .iter()
            .map(|c| {
                let obs = reqs.iter().filter(|r| r.priority == c.level).count() as f64;
                let exp = n * c.fraction;
                (obs - exp).powi(2) / exp
            })
            .sum();
        // 99.9% quantile with two degrees of freedom
        assert!(chi2 < 13.8, "chi2 = {chi2}");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate(&spec(0.0, 1000.0, 0)).is_err());
        assert!(generate(&spec(-1.0, 1000.0, 0)).is_err());
        let mut s = spec(1.0, 1000.0, 0);
        s.classes[0].fraction = 0.7;
        assert!(matches!(generate(&s), Err(WorkloadError::Spec(_))));
        let mut s = spec(1.0, 1000.0, 0);
        s.classes[1].weight = 0.0;
        assert!(generate(&s).is_err());
    }

    fn reqs_at(times: &[f64]) -> Vec<Request> {
        times
            .iter()
            .enumerate()
            .map(|(i, t)| Request {
                id: i as u64,
                arrival_time: *t,
                input_len: 10,
                expected_output_len: 2,
                priority: Priority::LOW,
                slo: SloSpec::new(100.0, 10.0).unwrap(),
            })
            .collect()
    }

    #[test]
    fn scaling_examples() {
        // 5 requests over 2 s: 2.5 req/s
        let mut r = reqs_at(&[100.0, 600.0, 700.0, 1500.0, 2100.0]);
        scale_to_rate(&mut r, 2.5).unwrap();
        let t: Vec<f64> = r.iter().map(|x| x.arrival_time).collect();
        assert_eq!(t, vec![0.0, 500.0, 600.0, 1400.0, 2000.0]);
        let mut half = r.clone();
        scale_to_rate(&mut half, 1.25).unwrap();
        for (a, b) in r.windows(2).zip(half.windows(2)) {
            let (ga, gb) = (a[1].arrival_time - a[0].arrival_time, b[1].arrival_time - b[0].arrival_time);
            assert!((gb - 2.0 * ga).abs() < 1e-9);
        }
    }

    #[test]
    fn scaled_random_traces_hit_target_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.random_range(2..200);
            let mut t = rng.random_range(0.0..1e4);
            let mut times = Vec::new();
            for _ in 0..n {
                t += rng.random_range(0.0..500.0);
                times.push(t);
            }
            let mut r = reqs_at(&times);
            if overall_rate(&r).is_none() {
                continue;
            }
            let target = rng.random_range(0.1..100.0);
            let before = r.clone();
            scale_to_rate(&mut r, target).unwrap();
            let got = overall_rate(&r).unwrap();
            assert!((got - target).abs() <= 1e-9 * target.max(1.0), "{got} vs {target}");
            assert!(r.iter().zip(&before).all(|(a, b)| a.id == b.id));
            assert!(r.windows(2).all(|w| w[0].arrival_time <= w[1].arrival_time));
        }
    }

    #[test]
    fn trace_round_trip_and_errors() {
        let recs = vec![
            TraceRecord { timestamp_ms: 0.0, input_len: 12, output_len: 3, priority: Some(Priority::HIGH), client_id: None },
            TraceRecord { timestamp_ms: 4.5, input_len: 7, output_len: 1, priority: None, client_id: Some("a".into()) },
        ];
        let mut buf = Vec::new();
        write_trace(&mut buf, &recs).unwrap();
        assert_eq!(read_trace(&buf[..]).unwrap(), recs);

        let bad = b"{\"timestamp_ms\":1,\"input_len\":3,\"output_len\":1}\n{\"timestamp_ms\":2,\"input_len\":3}\n";
        match read_trace(&bad[..]) {
            Err(WorkloadError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let backwards = b"{\"timestamp_ms\":5,\"input_len\":3,\"output_len\":1}\n{\"timestamp_ms\":2,\"input_len\":3,\"output_len\":1}\n";
        assert!(matches!(read_trace(&backwards[..]), Err(WorkloadError::Parse { line: 2, .. })));
    }

    #[test]
    fn trace_source_replays_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let recs: Vec<TraceRecord> = (0..10)
            .map(|i| TraceRecord {
                timestamp_ms: 1000.0 + 100.0 * f64::from(i),
                input_len: 5 + i,
                output_len: 2,
                priority: Some(Priority(u8::from(i % 2 == 0))),
                client_id: None,
            })
            .collect();
        write_trace(std::fs::File::create(&path).unwrap(), &recs).unwrap();
        let mut s = spec(1.0, 1.0, 0);
        s.source = Source::Trace { path: path.clone(), target_rate: None };
        let reqs = generate(&s).unwrap();
        assert_eq!(reqs.len(), 10);
        assert_eq!(reqs[3].arrival_time, 1300.0);
        assert_eq!(reqs[2].priority, Priority::HIGH);
        s.source = Source::Trace { path, target_rate: Some(5.0) };
        let scaled = generate(&s).unwrap();
        assert_eq!(scaled[0].arrival_time, 0.0);
        assert!((overall_rate(&scaled).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn per_length_slo() {
        let p = SloPolicy::PerLength { ttft_base: 100.0, ttft_per_token: 0.5, tpot: 50.0 };
        assert_eq!(p.slo_for(200).ttft_slo, 200.0);
    }

    #[test]
    fn default_first_weight_from_lengths() {
        let s = spec(1.0, 1.0, 0);
        let mut r = reqs_at(&[0.0, 1.0]);
        r[0].input_len = 30;
        r[1].input_len = 10;
        let w = s.gain_weights(None, &r).unwrap();
        assert_eq!(w.w_first, 10.0);
        assert_eq!(w.priority_weight(Priority::HIGH).unwrap(), 2.0);
        assert_eq!(s.gain_weights(Some(3.0), &r).unwrap().w_first, 3.0);
    }
}
