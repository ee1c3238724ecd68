//! Analytical batch latency model.
//!
//! A prefill pass over `l_q` new tokens with `l_kv` cached tokens costs
//! `a_p*l_q^2 + b_p*l_q*l_kv + c_p*l_q`; a decode step costs `a_d*l_kv + b_d`.
//! A batch costs the sum of its items plus a constant overhead `t_c`, and the
//! whole estimate is scaled by the online correction factor `beta`.

use std::io::BufRead;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LatencyError {
    #[error("need at least {needed} profile samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("design matrix is rank deficient; unidentifiable coefficient(s): {}", .0.join(", "))]
    Unidentifiable(Vec<&'static str>),
    #[error("invalid profile sample {index}: {reason}")]
    BadSample { index: usize, reason: String },
    #[error("correction window is empty")]
    EmptyWindow,
    #[error("estimated time must be positive, got {0}")]
    NonPositiveEstimate(f64),
    #[error("theta must lie in [0, 1], got {0}")]
    BadTheta(f64),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

/// One request's share of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkItem {
    pub phase: Phase,
    pub l_q: u32,
    pub l_kv: u32,
}

impl WorkItem {
    pub fn prefill(l_q: u32, l_kv: u32) -> Self {
        WorkItem {
            phase: Phase::Prefill,
            l_q,
            l_kv,
        }
    }

    pub fn decode(l_kv: u32) -> Self {
        WorkItem {
            phase: Phase::Decode,
            l_q: 1,
            l_kv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModelParams {
    pub a_p: f64,
    pub b_p: f64,
    pub c_p: f64,
    pub a_d: f64,
    pub b_d: f64,
    pub t_c: f64,
    #[serde(default = "one")]
    pub beta: f64,
}

fn one() -> f64 {
    1.0
}

pub const COEFFICIENT_NAMES: [&str; 6] = ["a_p", "b_p", "c_p", "a_d", "b_d", "t_c"];

impl LatencyModelParams {
    pub fn validate(&self) -> Result<(), String> {
        let vals = self.coefficients();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(format!("{} is not finite", COEFFICIENT_NAMES[i]));
        }
        if self.t_c < 0.0 {
            return Err(format!("t_c must be >= 0, got {}", self.t_c));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(format!("beta must be > 0, got {}", self.beta));
        }
        Ok(())
    }

    /// Extra requirement for parameters that drive a scheduler: every decode
    /// step must cost something, so densities stay finite.
    pub fn validate_for_scheduling(&self) -> Result<(), String> {
        self.validate()?;
        if self.b_d <= 0.0 {
            return Err(format!("b_d must be > 0 for scheduling, got {}", self.b_d));
        }
        Ok(())
    }

    pub fn coefficients(&self) -> [f64; 6] {
        [self.a_p, self.b_p, self.c_p, self.a_d, self.b_d, self.t_c]
    }

    pub fn from_coefficients(c: [f64; 6]) -> Self {
        LatencyModelParams {
            a_p: c[0],
            b_p: c[1],
            c_p: c[2],
            a_d: c[3],
            b_d: c[4],
            t_c: c[5],
            beta: 1.0,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    /// Item cost without the correction factor.
    pub fn raw_item(&self, w: &WorkItem) -> f64 {
        let l_q = f64::from(w.l_q);
        let l_kv = f64::from(w.l_kv);
        match w.phase {
            Phase::Prefill => self.a_p * l_q * l_q + self.b_p * l_q * l_kv + self.c_p * l_q,
            Phase::Decode => self.a_d * l_kv + self.b_d,
        }
    }

    pub fn estimate_item(&self, w: &WorkItem) -> f64 {
        self.beta * self.raw_item(w)
    }

    /// Batch cost without the correction factor.
    pub fn raw_batch(&self, items: &[WorkItem]) -> f64 {
        items.iter().map(|w| self.raw_item(w)).sum::<f64>() + self.t_c
    }

    pub fn estimate_batch(&self, items: &[WorkItem]) -> f64 {
        self.beta * self.raw_batch(items)
    }

    /// Corrected per-batch overhead.
    pub fn overhead(&self) -> f64 {
        self.beta * self.t_c
    }
}

impl Default for LatencyModelParams {
    /// Roughly a 7B model on one accelerator, in milliseconds.
    fn default() -> Self {
        LatencyModelParams {
            a_p: 2.0e-5,
            b_p: 1.0e-5,
            c_p: 0.06,
            a_d: 2.0e-4,
            b_d: 0.25,
            t_c: 8.0,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample {
    pub items: Vec<WorkItem>,
    pub observed_time: f64,
}

fn features(items: &[WorkItem]) -> [f64; 6] {
    let mut f = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    for w in items {
        let l_q = f64::from(w.l_q);
        let l_kv = f64::from(w.l_kv);
        match w.phase {
            Phase::Prefill => {
                f[0] += l_q * l_q;
                f[1] += l_q * l_kv;
                f[2] += l_q;
            }
            Phase::Decode => {
                f[3] += l_kv;
                f[4] += 1.0;
            }
        }
    }
    f
}

/// Ridge penalty (0 for ordinary least squares).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FitOptions {
    pub ridge: f64,
}

pub fn fit(samples: &[ProfileSample]) -> Result<LatencyModelParams, LatencyError> {
    fit_with(samples, FitOptions::default())
}

/// Least-squares fit of all six coefficients to observed batch times.
pub fn fit_with(
    samples: &[ProfileSample],
    opts: FitOptions,
) -> Result<LatencyModelParams, LatencyError> {
    const K: usize = 6;
    if samples.len() < K {
        return Err(LatencyError::TooFewSamples {
            needed: K,
            got: samples.len(),
        });
    }
    for (i, s) in samples.iter().enumerate() {
        if s.items.is_empty() {
            return Err(LatencyError::BadSample {
                index: i,
                reason: "no work items".into(),
            });
        }
        if !(s.observed_time > 0.0 && s.observed_time.is_finite()) {
            return Err(LatencyError::BadSample {
                index: i,
                reason: format!("observed_time = {}", s.observed_time),
            });
        }
    }
    let n = samples.len();
    let mut x = DMatrix::<f64>::zeros(n, K);
    let y = DVector::from_iterator(n, samples.iter().map(|s| s.observed_time));
    for (r, s) in samples.iter().enumerate() {
        for (c, v) in features(&s.items).into_iter().enumerate() {
            x[(r, c)] = v;
        }
    }
    // Columns differ by many orders of magnitude; normalize before solving.
    let mut scale = [0.0; K];
    for (c, sc) in scale.iter_mut().enumerate() {
        *sc = x.column(c).norm();
    }
    let dead: Vec<&'static str> = (0..K)
        .filter(|&c| scale[c] == 0.0)
        .map(|c| COEFFICIENT_NAMES[c])
        .collect();
    if !dead.is_empty() && opts.ridge == 0.0 {
        return Err(LatencyError::Unidentifiable(dead));
    }
    for c in 0..K {
        let s = if scale[c] == 0.0 { 1.0 } else { scale[c] };
        scale[c] = s;
        x.column_mut(c).scale_mut(1.0 / s);
    }

    let beta = if opts.ridge > 0.0 {
        let xtx = x.transpose() * &x + DMatrix::<f64>::identity(K, K) * opts.ridge;
        let xty = x.transpose() * &y;
        xtx.lu().solve(&xty).ok_or_else(|| {
            LatencyError::Unidentifiable(COEFFICIENT_NAMES.to_vec())
        })?
    } else {
        let svd = x.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let tol = smax * 1e-10 * n.max(K) as f64;
        let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
        if rank < K {
            let v_t = svd.v_t.as_ref().expect("requested V^T");
            let mut names = Vec::new();
            for (i, s) in svd.singular_values.iter().enumerate() {
                if *s <= tol {
                    for c in 0..K {
                        if v_t[(i, c)].abs() > 1e-6 && !names.contains(&COEFFICIENT_NAMES[c]) {
                            names.push(COEFFICIENT_NAMES[c]);
                        }
                    }
                }
            }
            names.sort_by_key(|n| COEFFICIENT_NAMES.iter().position(|c| c == n));
            return Err(LatencyError::Unidentifiable(names));
        }
        svd.solve(&y, tol)
            .map_err(|_| LatencyError::Unidentifiable(COEFFICIENT_NAMES.to_vec()))?
    };
    let mut coef = [0.0; K];
    for c in 0..K {
        coef[c] = beta[c] / scale[c];
    }
    Ok(LatencyModelParams::from_coefficients(coef))
}

/// Seeded shuffle of `samples` into `(train, eval)` with `eval_fraction`
/// of them (rounded down, at least one when possible) held out.
pub fn split_profile(
    samples: &[ProfileSample],
    eval_fraction: f64,
    seed: u64,
) -> (Vec<ProfileSample>, Vec<ProfileSample>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_eval = ((samples.len() as f64 * eval_fraction.clamp(0.0, 1.0)) as usize)
        .max(usize::from(samples.len() > 1 && eval_fraction > 0.0));
    let (eval, train) = idx.split_at(n_eval);
    let pick = |ix: &[usize]| ix.iter().map(|&i| samples[i].clone()).collect();
    (pick(train), pick(eval))
}

/// Mean absolute percentage error of corrected batch estimates.
pub fn mape(params: &LatencyModelParams, samples: &[ProfileSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples
        .iter()
        .map(|s| ((params.estimate_batch(&s.items) - s.observed_time) / s.observed_time).abs())
        .sum::<f64>()
        / samples.len() as f64
}

/// Momentum update of `beta` from `(observed, raw_estimate)` pairs.
///
/// `raw_estimate` is the uncorrected model output, so `beta` stays an
/// absolute correction rather than compounding across windows.
pub fn online_update(
    p: &LatencyModelParams,
    window: &[(f64, f64)],
    theta: f64,
) -> Result<LatencyModelParams, LatencyError> {
    if window.is_empty() {
        return Err(LatencyError::EmptyWindow);
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(LatencyError::BadTheta(theta));
    }
    let mut sum = 0.0;
    for &(obs, est) in window {
        if !(est > 0.0) {
            return Err(LatencyError::NonPositiveEstimate(est));
        }
        sum += obs / est;
    }
    let mean = sum / window.len() as f64;
    Ok(p.with_beta(theta * p.beta + (1.0 - theta) * mean))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionConfig {
    /// Batches per update.
    pub window: usize,
    pub theta: f64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            window: 32,
            theta: 0.8,
        }
    }
}

/// Accumulates batch observations and applies [`online_update`] once per
/// full window.
#[derive(Debug, Clone)]
pub struct OnlineCorrector {
    cfg: CorrectionConfig,
    pending: Vec<(f64, f64)>,
    updates: usize,
}

impl OnlineCorrector {
    pub fn new(cfg: CorrectionConfig) -> Self {
        OnlineCorrector {
            cfg,
            pending: Vec::with_capacity(cfg.window),
            updates: 0,
        }
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Records one batch; returns the updated parameters when a window closes.
    pub fn observe(
        &mut self,
        params: &LatencyModelParams,
        observed: f64,
        raw_estimate: f64,
    ) -> Option<LatencyModelParams> {
        if raw_estimate <= 0.0 {
            return None;
        }
        self.pending.push((observed, raw_estimate));
        if self.pending.len() < self.cfg.window.max(1) {
            return None;
        }
        let next = online_update(params, &self.pending, self.cfg.theta).ok();
        self.pending.clear();
        self.updates += 1;
        next
    }
}

/// Piecewise-constant execution-time multiplier.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSchedule {
    /// `(from_ms, factor)` steps, sorted by time.
    #[serde(default)]
    pub steps: Vec<(f64, f64)>,
}

impl DriftSchedule {
    pub fn step(at_ms: f64, factor: f64) -> Self {
        DriftSchedule {
            steps: vec![(at_ms, factor)],
        }
    }

    pub fn factor_at(&self, t: f64) -> f64 {
        self.steps
            .iter()
            .take_while(|(from, _)| *from <= t)
            .last()
            .map_or(1.0, |(_, f)| *f)
    }
}

/// Random profile batches labelled with `truth` times a Gaussian
/// multiplicative noise of relative standard deviation `noise`.
pub fn synthetic_profile(
    truth: &LatencyModelParams,
    count: usize,
    noise: f64,
    seed: u64,
) -> Vec<ProfileSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..count)
        .map(|_| {
            let mut items = Vec::new();
            let n_prefill = rng.random_range(0..4);
            let n_decode = if n_prefill == 0 {
                rng.random_range(1..128)
            } else {
                rng.random_range(0..128)
            };
            for _ in 0..n_prefill {
                items.push(WorkItem::prefill(
                    rng.random_range(16..2048),
                    rng.random_range(0..2048),
                ));
            }
            for _ in 0..n_decode {
                items.push(WorkItem::decode(rng.random_range(64..4096)));
            }
            let factor = (1.0 + noise * normal.sample(&mut rng)).max(0.05);
            let observed_time = truth.estimate_batch(&items) * factor;
            ProfileSample {
                items,
                observed_time,
            }
        })
        .collect()
}

pub fn read_profile(reader: impl BufRead) -> Result<Vec<ProfileSample>, LatencyError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: ProfileSample =
            serde_json::from_str(&line).map_err(|source| LatencyError::Parse {
                line: i + 1,
                source,
            })?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_profile(
    mut w: impl std::io::Write,
    samples: &[ProfileSample],
) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        writeln!(w)?;
    }
    Ok(())
}
