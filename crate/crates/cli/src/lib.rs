//! Experiment orchestration over the `ocgrid` simulator: single runs,
//! architecture sweeps and run comparison.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ocgrid::controller::ControlAction;
use ocgrid::metrics::{baseline_margins, evaluate_run, write_records_csv, Evaluation, Metric, Phase, PhaseBounds};
use ocgrid::model::{AgentId, ControllerArch, ObserverArch, ScenarioConfig, Violation};
use ocgrid::observer::AnomalyReport;
use ocgrid::plot::emit_plots;
use ocgrid::sim::run_scenario;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const OUTPUT_ROOT_ENV: &str = "OCGRID_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

pub const TRACE_FILE: &str = "trace.jsonl";
pub const RECORDS_FILE: &str = "records.csv";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const PLOTS_DIR: &str = "plots";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("scenario failed validation")]
    Validation(Vec<Violation>),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// Stable process exit code.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<ocgrid::Error> for CliError {
    fn from(e: ocgrid::Error) -> Self {
        match e {
            ocgrid::Error::Validation(v) => CliError::Validation(v),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "detail")]
pub enum RunStatus {
    Complete,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub scenario_path: String,
    /// SHA-256 of the canonical scenario text.
    pub config_hash: String,
    /// Same hash with the architecture fields neutralized; runs that differ
    /// only in architecture share it.
    pub base_hash: String,
    pub output_dir: PathBuf,
    pub status: RunStatus,
    pub seed: u64,
    pub observer_arch: ObserverArch,
    pub info_level: u8,
    pub controller_arch: ControllerArch,
}

impl RunManifest {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let p = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(&p, e))
    }
}

/// Everything a run writes besides the trace and the plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub evaluation: Evaluation,
    pub compromised: BTreeSet<AgentId>,
    pub reports: Vec<AnomalyReport>,
    pub actions: Vec<ControlAction>,
    pub final_blacklist: BTreeSet<AgentId>,
    pub control_tick: Option<u64>,
    pub degraded: bool,
}

impl RunEvaluation {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let p = dir.join(EVALUATION_FILE);
        let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(&p, e))
    }

    /// Whether a report names a compromised agent.
    pub fn detected(&self) -> bool {
        self.reports.iter().any(|r| self.compromised.contains(&r.suspect))
    }

    pub fn false_positives(&self) -> usize {
        self.reports.iter().filter(|r| !self.compromised.contains(&r.suspect)).count()
    }
}

fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn config_hash(cfg: &ScenarioConfig) -> CliResult<String> {
    Ok(sha256_hex(&cfg.to_toml()?))
}

pub fn base_hash(cfg: &ScenarioConfig) -> CliResult<String> {
    let mut c = cfg.clone();
    c.observer_arch = ObserverArch::MultiLeveled;
    c.info_level = 4;
    c.controller_arch = ControllerArch::None;
    config_hash(&c)
}

/// Command-line overrides applied on top of a scenario file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tick_cap: Option<u64>,
    pub observer: Option<ObserverArch>,
    pub level: Option<u8>,
    pub controller: Option<ControllerArch>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ScenarioConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.tick_cap {
            cfg.max_ticks_per_interval = t;
        }
        if let Some(o) = self.observer {
            cfg.observer_arch = o;
        }
        if let Some(l) = self.level {
            cfg.info_level = l;
        }
        if let Some(c) = self.controller {
            cfg.controller_arch = c;
        }
    }
}

pub fn load_scenario(path: &Path) -> CliResult<ScenarioConfig> {
    let cfg = ScenarioConfig::load(path)?;
    ocgrid::model::validate_scenario(&cfg).map_err(CliError::Validation)?;
    Ok(cfg)
}

/// Output root from the environment, falling back to `runs`.
pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

/// Loads, overrides and runs a scenario file.
pub fn cmd_run(scenario: &Path, out_dir: &Path, overrides: &Overrides) -> CliResult<RunManifest> {
    let mut cfg = load_scenario(scenario)?;
    overrides.apply(&mut cfg);
    run_config(&cfg, &scenario.display().to_string(), out_dir)
}

/// Runs an in-memory scenario and writes the five run artifacts into `out_dir`.
/// A runtime fault still leaves a manifest with a failed status behind.
pub fn run_config(cfg: &ScenarioConfig, scenario_label: &str, out_dir: &Path) -> CliResult<RunManifest> {
    ocgrid::model::validate_scenario(cfg).map_err(CliError::Validation)?;
    let hash = config_hash(cfg)?;
    let mut manifest = RunManifest {
        run_id: hash[..12].to_string(),
        scenario_path: scenario_label.to_string(),
        config_hash: hash,
        base_hash: base_hash(cfg)?,
        output_dir: out_dir.to_path_buf(),
        status: RunStatus::Complete,
        seed: cfg.seed,
        observer_arch: cfg.observer_arch,
        info_level: cfg.info_level,
        controller_arch: cfg.controller_arch,
    };
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let result = write_run(cfg, out_dir);
    if let Err(e) = &result {
        manifest.status = RunStatus::Failed(e.to_string());
    }
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out_dir.join(MANIFEST_FILE), text + "\n")?;
    result.map(|_| manifest)
}

fn write_run(cfg: &ScenarioConfig, dir: &Path) -> CliResult<()> {
    let out = match run_scenario(cfg) {
        Ok(o) => o,
        Err(ocgrid::Error::NonConvergence { interval, cap, tick, partial }) => {
            let p = dir.join(TRACE_FILE);
            let mut buf = Vec::new();
            partial.write_jsonl(&mut buf).map_err(|e| io_err(&p, e))?;
            write_file(&p, buf)?;
            return Err(CliError::Runtime(format!(
                "interval {interval} did not quiesce before tick cap {cap} (reached tick {tick})"
            )));
        }
        Err(e) => return Err(e.into()),
    };

    let p = dir.join(TRACE_FILE);
    let mut buf = Vec::new();
    out.trace.write_jsonl(&mut buf).map_err(|e| io_err(&p, e))?;
    write_file(&p, buf)?;

    let margins = baseline_margins(&out.records)?;
    let evaluation = evaluate_run(&out.records, &margins);
    let p = dir.join(RECORDS_FILE);
    let mut buf = Vec::new();
    write_records_csv(&out.records, Some(&evaluation), &mut buf)?;
    write_file(&p, buf)?;

    emit_plots(&out.records, &margins, PhaseBounds::from(cfg), &dir.join(PLOTS_DIR))?;

    let eval = RunEvaluation {
        evaluation,
        compromised: out.compromised,
        reports: out.reports,
        actions: out.actions,
        final_blacklist: out.final_blacklist,
        control_tick: out.control_tick,
        degraded: out.degraded,
    };
    let text = serde_json::to_string_pretty(&eval).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&dir.join(EVALUATION_FILE), text + "\n")
}

/// Architecture selectors of a sweep. A dimension left empty keeps the base
/// scenario's value; a matrix with every dimension empty has no cells.
#[derive(Debug, Clone, Default)]
pub struct Matrix {
    pub observers: Vec<ObserverArch>,
    pub levels: Vec<u8>,
    pub controllers: Vec<ControllerArch>,
}

impl Matrix {
    pub fn is_empty(&self) -> bool {
        self.observers.is_empty() && self.levels.is_empty() && self.controllers.is_empty()
    }

    pub fn cells(&self, base: &ScenarioConfig) -> Vec<(ObserverArch, u8, ControllerArch)> {
        if self.is_empty() {
            return Vec::new();
        }
        let or = |v: &[ObserverArch]| if v.is_empty() { vec![base.observer_arch] } else { v.to_vec() };
        let lr = |v: &[u8]| if v.is_empty() { vec![base.info_level] } else { v.to_vec() };
        let cr = |v: &[ControllerArch]| if v.is_empty() { vec![base.controller_arch] } else { v.to_vec() };
        let mut out = Vec::new();
        for o in or(&self.observers) {
            for l in lr(&self.levels) {
                for c in cr(&self.controllers) {
                    out.push((o, l, c));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub name: String,
    pub manifest: RunManifest,
    pub evaluation: Option<RunEvaluation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    /// The summary table as written to `summary.csv`.
    pub summary: String,
}

fn cell_name(o: ObserverArch, l: u8, c: ControllerArch) -> String {
    format!("obs-{o}_lvl-{l}_ctl-{c}").to_lowercase()
}

/// One run per matrix cell, all with the base scenario's seed. A failing
/// cell is recorded and the sweep continues.
pub fn cmd_sweep(base: &Path, matrix: &Matrix, out_dir: &Path, overrides: &Overrides) -> CliResult<SweepResult> {
    let mut cfg = load_scenario(base)?;
    overrides.apply(&mut cfg);
    sweep_config(&cfg, &base.display().to_string(), matrix, out_dir)
}

pub fn sweep_config(base: &ScenarioConfig, label: &str, matrix: &Matrix, out_dir: &Path) -> CliResult<SweepResult> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let jobs: Vec<(String, ScenarioConfig)> = matrix
        .cells(base)
        .into_iter()
        .map(|(o, l, c)| {
            let mut cfg = base.clone();
            cfg.observer_arch = o;
            cfg.info_level = l;
            cfg.controller_arch = c;
            (cell_name(o, l, c), cfg)
        })
        .collect();

    // Cells are independent; each owns its kernel and output directory.
    let mut results: Vec<Option<CliResult<RunManifest>>> = (0..jobs.len()).map(|_| None).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    std::thread::scope(|s| {
        for (w, chunk) in results.chunks_mut(jobs.len().div_ceil(workers).max(1)).enumerate() {
            let jobs = &jobs;
            let start = w * jobs.len().div_ceil(workers).max(1);
            s.spawn(move || {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    let (name, cfg) = &jobs[start + i];
                    *slot = Some(run_config(cfg, label, &out_dir.join(name)));
                }
            });
        }
    });

    let mut cells = Vec::new();
    for ((name, cfg), r) in jobs.iter().zip(results) {
        let dir = out_dir.join(name);
        let cell = match r.expect("every cell ran") {
            Ok(m) => SweepCell {
                name: name.clone(),
                evaluation: Some(RunEvaluation::load(&dir)?),
                manifest: m,
            },
            Err(CliError::Validation(v)) => return Err(CliError::Validation(v)),
            Err(CliError::Runtime(msg)) => SweepCell {
                name: name.clone(),
                manifest: RunManifest::load(&dir).unwrap_or_else(|_| RunManifest {
                    run_id: String::new(),
                    scenario_path: label.to_string(),
                    config_hash: String::new(),
                    base_hash: String::new(),
                    output_dir: dir.clone(),
                    status: RunStatus::Failed(msg.clone()),
                    seed: cfg.seed,
                    observer_arch: cfg.observer_arch,
                    info_level: cfg.info_level,
                    controller_arch: cfg.controller_arch,
                }),
                evaluation: None,
            },
        };
        cells.push(cell);
    }
    let summary = summary_table(&cells);
    write_file(&out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(SweepResult { cells, summary })
}

fn summary_header() -> String {
    let mut h = String::from("cell,observer,level,controller,status,detected,false_positives");
    for p in Phase::ALL {
        for m in Metric::ALL {
            let _ = write!(h, ",{}_{}_out", p.to_string().to_lowercase(), m.name());
        }
    }
    h
}

/// Per-phase out-of-range fractions per cell, one CSV row each.
pub fn summary_table(cells: &[SweepCell]) -> String {
    let mut s = summary_header();
    s.push('\n');
    for c in cells {
        let m = &c.manifest;
        let status = match &m.status {
            RunStatus::Complete => "complete",
            RunStatus::Failed(_) => "failed",
        };
        let _ = write!(
            s,
            "{},{},{},{},{status}",
            c.name, m.observer_arch, m.info_level, m.controller_arch
        );
        match &c.evaluation {
            Some(e) => {
                let _ = write!(s, ",{},{}", e.detected(), e.false_positives());
                for p in Phase::ALL {
                    for metric in Metric::ALL {
                        let _ = write!(s, ",{:.4}", e.evaluation.phase(p).fraction_out(metric));
                    }
                }
            }
            None => {
                s.push_str(",,");
                for _ in 0..Phase::ALL.len() * Metric::ALL.len() {
                    s.push(',');
                }
            }
        }
        s.push('\n');
    }
    s
}

/// Flag counts of one run for one phase and metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlagCounts {
    pub above: usize,
    pub below: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Difference {
    pub phase: Phase,
    pub metric: Metric,
    /// Counts per run, in input order.
    pub counts: Vec<FlagCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub runs: Vec<RunManifest>,
    pub differences: Vec<Difference>,
    pub report: String,
}

/// Side-by-side per-phase flag counts of completed runs that share a base
/// scenario.
pub fn cmd_compare(dirs: &[PathBuf]) -> CliResult<Comparison> {
    if dirs.len() < 2 {
        return Err(CliError::Runtime("compare needs at least two run directories".into()));
    }
    let mut runs = Vec::new();
    let mut evals = Vec::new();
    for d in dirs {
        let m = RunManifest::load(d)?;
        if m.status != RunStatus::Complete {
            return Err(CliError::Runtime(format!("run in {} is not complete", d.display())));
        }
        evals.push(RunEvaluation::load(d)?);
        runs.push(m);
    }
    if let Some(odd) = runs.iter().find(|m| m.base_hash != runs[0].base_hash) {
        return Err(CliError::Runtime(format!(
            "runs {} and {} come from different base scenarios; only architecture fields may differ",
            runs[0].output_dir.display(),
            odd.output_dir.display()
        )));
    }

    let mut report = String::from("phase,metric");
    for m in &runs {
        let _ = write!(report, ",{}/{}/{}", m.observer_arch, m.info_level, m.controller_arch);
    }
    report.push('\n');
    let mut differences = Vec::new();
    for p in Phase::ALL {
        for metric in Metric::ALL {
            let counts: Vec<FlagCounts> = evals
                .iter()
                .map(|e| {
                    let c = e.evaluation.phase(p).get(metric);
                    FlagCounts {
                        above: c.above,
                        below: c.below,
                    }
                })
                .collect();
            let _ = write!(report, "{p},{}", metric.name());
            for c in &counts {
                let _ = write!(report, ",+{}/-{}", c.above, c.below);
            }
            report.push('\n');
            if counts.iter().any(|c| *c != counts[0]) {
                differences.push(Difference {
                    phase: p,
                    metric,
                    counts,
                });
            }
        }
    }
    let _ = writeln!(report, "differences,{}", differences.len());
    Ok(Comparison {
        runs,
        differences,
        report,
    })
}
