//! Experiment configuration files and the run matrix they describe.
//!
//! An experiment is a TOML file with a `[sim]` section (a [`SimConfig`]), a
//! `[workload]` section (a [`WorkloadSpec`]), an optional `[gain]` section,
//! a `[[matrix]]` list of scheduler pairs and a list of `rates`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gain::{GainReport, GainWeights, Priority};
use crate::simcore::{run, GlobalPolicy, LocalPolicy, SimConfig, SimError, SimResult};
use crate::workload::{generate, overall_rate, scale_to_rate, Request, WorkloadError, WorkloadSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config field `{field}`: {msg}")]
    Invalid { field: String, msg: String },
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn invalid(field: &str, msg: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        msg: msg.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GainSection {
    /// First-token weight; defaults to mean input over mean output length.
    pub w_first: Option<f64>,
    pub first_token_unbuffered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerPair {
    pub local: LocalPolicy,
    pub global: GlobalPolicy,
}

impl SchedulerPair {
    pub fn label(&self) -> String {
        format!("{}+{}", self.local.name(), self.global.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Overrides both `sim.seed` and `workload.seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Overall request rates (req/s); empty runs the workload as generated.
    #[serde(default)]
    pub rates: Vec<f64>,
    #[serde(default)]
    pub gain: GainSection,
    pub sim: SimConfig,
    pub workload: WorkloadSpec,
    pub matrix: Vec<SchedulerPair>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        // trace paths are relative to the config file
        if let crate::workload::Source::Trace { path: trace, .. } = &mut cfg.workload.source {
            if trace.is_relative() {
                if let Some(dir) = path.parent() {
                    *trace = dir.join(&*trace);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Applies a seed override to every random source.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(invalid("name", "must be a nonempty file-name-safe string"));
        }
        if self.matrix.is_empty() {
            return Err(invalid("matrix", "needs at least one scheduler pair"));
        }
        for (i, r) in self.rates.iter().enumerate() {
            if !(*r > 0.0 && r.is_finite()) {
                return Err(invalid(&format!("rates[{i}]"), format!("must be positive, got {r}")));
            }
        }
        if let Some(w) = self.gain.w_first {
            if !(w > 0.0 && w.is_finite()) {
                return Err(invalid("gain.w_first", format!("must be positive, got {w}")));
            }
        }
        self.effective_sim()
            .validate()
            .map_err(|e| invalid("sim", e))?;
        self.effective_workload()
            .validate()
            .map_err(|e| invalid("workload", e))?;
        Ok(())
    }

    pub fn effective_sim(&self) -> SimConfig {
        let mut s = self.sim.clone();
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        s
    }

    pub fn effective_workload(&self) -> WorkloadSpec {
        let mut w = self.workload.clone();
        if let Some(seed) = self.seed {
            w.seed = seed;
        }
        w
    }

    pub fn levels(&self) -> Vec<Priority> {
        let mut l: Vec<Priority> = self.workload.classes.iter().map(|c| c.level).collect();
        l.sort();
        l
    }

    /// Every (scheduler pair, rate) cell, in matrix then rate order.
    pub fn cells(&self) -> Vec<Cell> {
        let rates: Vec<Option<f64>> = if self.rates.is_empty() {
            vec![None]
        } else {
            self.rates.iter().copied().map(Some).collect()
        };
        let mut out = Vec::new();
        for (mi, pair) in self.matrix.iter().enumerate() {
            for (ri, rate) in rates.iter().enumerate() {
                out.push(Cell {
                    index: (mi, ri),
                    pair: *pair,
                    rate: *rate,
                });
            }
        }
        out
    }

    /// Generated workload and the gain weights derived from it.
    pub fn prepare(&self) -> Result<(Vec<Request>, GainWeights), ConfigError> {
        let spec = self.effective_workload();
        let reqs = generate(&spec)?;
        let mut w = spec
            .gain_weights(self.gain.w_first, &reqs)
            .map_err(|e| invalid("gain", e))?;
        w.first_token_unbuffered = self.gain.first_token_unbuffered;
        Ok((reqs, w))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub index: (usize, usize),
    pub pair: SchedulerPair,
    pub rate: Option<f64>,
}

impl Cell {
    pub fn file_stem(&self, name: &str) -> String {
        let rate = match self.rate {
            Some(r) => format!("r{r}"),
            None => "native".to_string(),
        };
        format!("{name}_{}_{}_{rate}", self.pair.local.name(), self.pair.global.name())
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    /// Overall rate of the simulated workload.
    pub rate: f64,
    pub result: SimResult,
}

pub fn run_cell(
    cfg: &ExperimentConfig,
    cell: &Cell,
    template: &[Request],
    weights: &GainWeights,
) -> Result<CellResult, ConfigError> {
    let mut reqs = template.to_vec();
    if let Some(r) = cell.rate {
        scale_to_rate(&mut reqs, r)?;
    }
    let mut sim = cfg.effective_sim();
    sim.local_policy = cell.pair.local;
    sim.global_policy = cell.pair.global;
    let result = run(&sim, weights, &reqs)?;
    Ok(CellResult {
        cell: *cell,
        rate: cell.rate.or_else(|| overall_rate(&reqs)).unwrap_or(0.0),
        result,
    })
}

/// Runs every cell sequentially.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<CellResult>, ConfigError> {
    let (reqs, w) = cfg.prepare()?;
    cfg.cells().iter().map(|c| run_cell(cfg, c, &reqs, &w)).collect()
}

#[derive(Serialize)]
struct Summary<'a> {
    name: &'a str,
    local_policy: &'a str,
    global_policy: &'a str,
    rate: f64,
    seed: u64,
    end_time: f64,
    report: &'a GainReport,
    served_tokens: &'a std::collections::BTreeMap<Priority, u64>,
    instances: &'a [crate::simcore::InstanceStats],
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn requests_csv(res: &SimResult, weights: &GainWeights, workload_slos: &[crate::gain::SloSpec]) -> Result<String, SimError> {
    let mut s = String::from("id,priority,arrival,ttft,tpot,tokens,tdg\n");
    for (rec, slo) in res.records.iter().zip(workload_slos) {
        let tdg = crate::gain::tdg_gain(rec, slo, weights)?;
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            rec.request_id,
            rec.priority,
            rec.arrival_time,
            opt(rec.ttft()),
            opt(rec.tpot()),
            rec.emit_times.len(),
            tdg
        )
        .expect("write to string");
    }
    Ok(s)
}

pub fn timeline_csv(res: &SimResult) -> String {
    let mut s = String::from("start_ms,tdg,tokens,batches,urgent_mean,normal_mean\n");
    for b in &res.timeline {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            b.start_ms, b.tdg, b.tokens, b.batches, b.urgent_mean, b.normal_mean
        )
        .expect("write to string");
    }
    s
}

pub fn comparison_csv(results: &[CellResult], levels: &[Priority]) -> String {
    let mut sorted: Vec<&CellResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.cell.index);
    let mut header = vec!["local".to_string(), "global".to_string(), "rate".to_string()];
    header.extend(GainReport::csv_header(levels));
    let mut s = header.join(",");
    s.push('\n');
    for r in sorted {
        let mut row = vec![
            r.cell.pair.local.name().to_string(),
            r.cell.pair.global.name().to_string(),
            r.rate.to_string(),
        ];
        row.extend(r.result.report.csv_row(levels));
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf, ConfigError> {
    fs::write(&path, contents).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path)
}

/// Writes per-cell summary JSON, request CSV and timeline CSV (plus audit
/// JSONL when enabled), and the cross-run comparison CSV. Returns the
/// written paths in write order.
pub fn write_outputs(
    cfg: &ExperimentConfig,
    template: &[Request],
    weights: &GainWeights,
    results: &[CellResult],
    dir: &Path,
) -> Result<Vec<PathBuf>, ConfigError> {
    fs::create_dir_all(dir).map_err(|source| ConfigError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let slos: Vec<_> = template.iter().map(|r| r.slo).collect();
    let sim = cfg.effective_sim();
    let mut sorted: Vec<&CellResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.cell.index);
    let mut written = Vec::new();
    for r in sorted {
        let stem = r.cell.file_stem(&cfg.name);
        let summary = Summary {
            name: &cfg.name,
            local_policy: r.cell.pair.local.name(),
            global_policy: r.cell.pair.global.name(),
            rate: r.rate,
            seed: sim.seed,
            end_time: r.result.end_time,
            report: &r.result.report,
            served_tokens: &r.result.served_tokens,
            instances: &r.result.instances,
        };
        let json = serde_json::to_string_pretty(&summary).map_err(|e| ConfigError::Parse(e.to_string()))?;
        written.push(write(dir.join(format!("{stem}_summary.json")), &(json + "\n"))?);
        written.push(write(dir.join(format!("{stem}_requests.csv")), &requests_csv(&r.result, weights, &slos)?)?);
        written.push(write(dir.join(format!("{stem}_timeline.csv")), &timeline_csv(&r.result))?);
        if sim.audit {
            let mut lines = String::new();
            for a in &r.result.audit {
                lines.push_str(&serde_json::to_string(a).map_err(|e| ConfigError::Parse(e.to_string()))?);
                lines.push('\n');
            }
            written.push(write(dir.join(format!("{stem}_audit.jsonl")), &lines)?);
        }
    }
    written.push(write(
        dir.join(format!("{}_comparison.csv", cfg.name)),
        &comparison_csv(results, &cfg.levels()),
    )?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
name = "demo"
rates = [2.0, 4.0]

[gain]
w_first = 4.0

[sim]
horizon = 30000.0
blocks_per_instance = 2048
audit = true
drift = { steps = [[1000.0, 1.2]] }
topology = { kind = "pd_disagg", n_prefill = 2, n_decode = 1 }
correction = { window = 16, theta = 0.8 }

[sim.slide]
gamma = 1.5

[workload]
seed = 3
source = { kind = "poisson", rate = 4.0, duration = 10000.0, input = { kind = "uniform", low = 16, high = 256 }, output = { kind = "fixed", value = 8 } }
slo = { kind = "fixed", ttft = 1500.0, tpot = 80.0 }

[[workload.classes]]
level = 1
fraction = 0.5
weight = 2.0

[[workload.classes]]
level = 0
fraction = 0.5
weight = 1.0

[[matrix]]
local = "slide"
global = "go_routing"

[[matrix]]
local = "sarathi_fcfs"
global = "min_load"
"#;

    #[test]
    fn parse_and_round_trip() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.sim.slide.gamma, 1.5);
        assert_eq!(cfg.sim.block_size, 16);
        assert_eq!(cfg.cells().len(), 4);
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn invalid_fields_are_named() {
        let broken = SAMPLE.replace("horizon = 30000.0", "horizon = -1.0");
        match ExperimentConfig::from_toml(&broken) {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "sim"),
            other => panic!("{other:?}"),
        }
        let broken = SAMPLE.replace("rates = [2.0, 4.0]", "rates = [2.0, 0.0]");
        match ExperimentConfig::from_toml(&broken) {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "rates[1]"),
            other => panic!("{other:?}"),
        }
        let unknown = SAMPLE.replace("local = \"slide\"", "local = \"sjf\"");
        assert!(matches!(ExperimentConfig::from_toml(&unknown), Err(ConfigError::Parse(_))));
        let typo = SAMPLE.replace("gamma = 1.5", "gama = 1.5");
        assert!(matches!(ExperimentConfig::from_toml(&typo), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn seed_override_reaches_everything() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap().with_seed(99);
        assert_eq!(cfg.effective_sim().seed, 99);
        assert_eq!(cfg.effective_workload().seed, 99);
    }

    #[test]
    fn outputs_are_deterministic() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        let (reqs, w) = cfg.prepare().unwrap();
        let read_all = |dir: &Path| {
            let res = run_all(&cfg).unwrap();
            let files = write_outputs(&cfg, &reqs, &w, &res, dir).unwrap();
            files.iter().map(|p| fs::read(p).unwrap()).collect::<Vec<_>>()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let fa = read_all(a.path());
        assert_eq!(fa.len(), 4 * 4 + 1);
        assert_eq!(fa, read_all(b.path()));
        let cmp = String::from_utf8(fa.last().unwrap().clone()).unwrap();
        assert_eq!(cmp.lines().count(), 5);
    }
}
