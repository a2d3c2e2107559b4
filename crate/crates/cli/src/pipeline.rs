//! Pipeline configs: ordered steps wired by file references, command-line
//! overrides, run manifests and bulk runs over dataset lists.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use petgraph::algo::toposort;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use voxstream::JobControl;

use crate::error::{CliError, Result};
use crate::ops::{op_arity, run_op, Context};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    /// Defaults to `op`; names must be unique.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub op: String,
    #[serde(default = "empty_object")]
    pub params: Value,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
}

fn empty_object() -> Value {
    json!({})
}

impl StepConfig {
    pub fn name(&self) -> &str {
        self.name.as_deref().unwrap_or(&self.op)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Substituted for `${name}` in inputs, outputs and string parameters.
    #[serde(default)]
    pub variables: BTreeMap<String, String>,
    pub steps: Vec<StepConfig>,
    /// Inputs of a bulk run, each bound to `${dataset}`.
    #[serde(default)]
    pub datasets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// `key=value` from the command line. `step.param[.sub...]` sets a step
/// parameter, a bare `key` sets a variable. Values are parsed as JSON and
/// fall back to plain strings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Override {
    pub key: String,
    pub value: Value,
}

impl std::str::FromStr for Override {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {s:?} is not key=value")))?;
        if key.is_empty() {
            return Err(CliError::Config(format!("override {s:?} has an empty key")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        Ok(Override {
            key: key.to_string(),
            value,
        })
    }
}

impl PipelineConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| CliError::Config(format!("pipeline config: {e}")))
    }

    pub fn apply_overrides(&mut self, overrides: &[Override]) -> Result<()> {
        for o in overrides {
            match o.key.split_once('.') {
                None => {
                    let v = match &o.value {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    };
                    self.variables.insert(o.key.clone(), v);
                }
                Some((step, path)) => {
                    let s = self
                        .steps
                        .iter_mut()
                        .find(|s| s.name() == step)
                        .ok_or_else(|| CliError::Config(format!("override {:?}: no step named {step:?}", o.key)))?;
                    let mut target = &mut s.params;
                    for part in path.split('.') {
                        if target.is_null() {
                            *target = json!({});
                        }
                        if !target.is_object() {
                            return Err(CliError::Config(format!("override {:?}: {part:?} is not inside an object", o.key)));
                        }
                        target = target
                            .as_object_mut()
                            .expect("checked above")
                            .entry(part)
                            .or_insert(Value::Null);
                    }
                    *target = o.value.clone();
                }
            }
        }
        Ok(())
    }

    /// Checks everything that does not depend on the file system: step
    /// names, operations, arities and the step graph.
    pub fn validate_structure(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(CliError::Config("pipeline has no steps".into()));
        }
        let mut names = HashMap::new();
        for (i, s) in self.steps.iter().enumerate() {
            if names.insert(s.name(), i).is_some() {
                return Err(CliError::Config(format!("duplicate step name {:?}", s.name())));
            }
            let a = op_arity(&s.op).ok_or_else(|| CliError::Config(format!("step {:?}: unknown operation {:?}", s.name(), s.op)))?;
            let ok = |n: usize, (lo, hi): (usize, usize)| n >= lo && n <= hi;
            if !ok(s.inputs.len(), a.inputs) || !ok(s.outputs.len(), a.outputs) {
                return Err(CliError::Config(format!(
                    "step {:?}: {} takes {:?} inputs and {:?} outputs, got {} and {}",
                    s.name(),
                    s.op,
                    a.inputs,
                    a.outputs,
                    s.inputs.len(),
                    s.outputs.len()
                )));
            }
            if !s.params.is_object() {
                return Err(CliError::Config(format!("step {:?}: params must be an object", s.name())));
            }
        }
        let mut producer: HashMap<&str, usize> = HashMap::new();
        for (i, s) in self.steps.iter().enumerate() {
            for o in &s.outputs {
                if let Some(j) = producer.insert(o, i) {
                    return Err(CliError::Config(format!(
                        "output {o:?} is written by both {:?} and {:?}",
                        self.steps[j].name(),
                        s.name()
                    )));
                }
            }
        }
        let mut g = DiGraph::<usize, ()>::new();
        let nodes: Vec<_> = (0..self.steps.len()).map(|i| g.add_node(i)).collect();
        for (i, s) in self.steps.iter().enumerate() {
            for input in &s.inputs {
                if let Some(&j) = producer.get(input.as_str()) {
                    g.add_edge(nodes[j], nodes[i], ());
                }
            }
        }
        if let Err(cycle) = toposort(&g, None) {
            return Err(CliError::Config(format!(
                "step graph has a cycle through {:?}",
                self.steps[g[cycle.node_id()]].name()
            )));
        }
        for (i, s) in self.steps.iter().enumerate() {
            for input in &s.inputs {
                if let Some(&j) = producer.get(input.as_str()) {
                    if j > i {
                        return Err(CliError::Config(format!(
                            "step {:?} reads {input:?} before step {:?} writes it",
                            s.name(),
                            self.steps[j].name()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Substitutes variables and resolves every path. Outputs live under
    /// `out_dir`; inputs not produced by a step are taken relative to
    /// `base_dir` and must exist.
    pub fn plan(&self, base_dir: &Path, out_dir: &Path, extra: &BTreeMap<String, String>) -> Result<Vec<PlannedStep>> {
        self.validate_structure()?;
        let mut vars = self.variables.clone();
        vars.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        vars.insert("out".into(), out_dir.display().to_string());
        let produced: HashMap<&str, PathBuf> = self
            .steps
            .iter()
            .flat_map(|s| &s.outputs)
            .map(|o| Ok((o.as_str(), out_dir.join(substitute(o, &vars)?))))
            .collect::<Result<_>>()?;
        self.steps
            .iter()
            .map(|s| {
                let inputs = s
                    .inputs
                    .iter()
                    .map(|i| match produced.get(i.as_str()) {
                        Some(p) => Ok(p.clone()),
                        None => {
                            let p = base_dir.join(substitute(i, &vars)?);
                            if p.exists() {
                                Ok(p)
                            } else {
                                Err(CliError::Config(format!(
                                    "step {:?}: input {} does not exist and no earlier step writes it",
                                    s.name(),
                                    p.display()
                                )))
                            }
                        }
                    })
                    .collect::<Result<_>>()?;
                Ok(PlannedStep {
                    name: s.name().to_string(),
                    op: s.op.clone(),
                    params: substitute_value(&s.params, &vars)?,
                    inputs,
                    outputs: s.outputs.iter().map(|o| produced[o.as_str()].clone()).collect(),
                })
            })
            .collect()
    }
}

fn substitute(s: &str, vars: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let end = rest[start..]
            .find('}')
            .ok_or_else(|| CliError::Config(format!("unterminated variable in {s:?}")))?;
        let name = &rest[start + 2..start + end];
        let v = vars
            .get(name)
            .ok_or_else(|| CliError::Config(format!("undefined variable {name:?} in {s:?}")))?;
        out.push_str(v);
        rest = &rest[start + end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn substitute_value(v: &Value, vars: &BTreeMap<String, String>) -> Result<Value> {
    Ok(match v {
        Value::String(s) => Value::String(substitute(s, vars)?),
        Value::Array(a) => Value::Array(a.iter().map(|x| substitute_value(x, vars)).collect::<Result<_>>()?),
        Value::Object(o) => Value::Object(
            o.iter()
                .map(|(k, x)| Ok((k.clone(), substitute_value(x, vars)?)))
                .collect::<Result<_>>()?,
        ),
        other => other.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannedStep {
    pub name: String,
    pub op: String,
    pub params: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub name: String,
    pub op: String,
    pub status: String,
    pub seconds: f64,
    #[serde(default)]
    pub report: Value,
}

/// Everything needed to repeat a run: the config as written, the
/// overrides applied to it, seeds, thread count and versions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub config: PipelineConfig,
    pub overrides: Vec<Override>,
    /// The config after overrides.
    pub resolved: PipelineConfig,
    #[serde(default)]
    pub variables: BTreeMap<String, String>,
    pub seed: u64,
    pub threads: usize,
    pub versions: BTreeMap<String, String>,
    pub status: String,
    #[serde(default)]
    pub steps: Vec<StepRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<Value>,
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("voxstream-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("manifest".to_string(), MANIFEST_VERSION.to_string()),
    ])
}

/// A config file, or a manifest of an earlier run whose config and
/// overrides are replayed.
pub fn load_config(path: &Path) -> Result<(PipelineConfig, Vec<Override>, Option<u64>)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let v: Value = serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if v.get("manifest_version").is_some() {
        let m: Manifest = serde_json::from_value(v).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut config = m.config;
        config.variables.extend(m.variables);
        return Ok((config, m.overrides, Some(m.seed)));
    }
    Ok((PipelineConfig::from_json(&bytes)?, Vec::new(), None))
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub base_dir: PathBuf,
    pub out_dir: PathBuf,
    pub overrides: Vec<Override>,
    pub seed: u64,
    pub budget: usize,
    pub job: Arc<JobControl>,
}

impl RunOptions {
    pub fn new(base_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            base_dir: base_dir.into(),
            out_dir: out_dir.into(),
            overrides: Vec::new(),
            seed: 0,
            budget: crate::DEFAULT_BUDGET,
            job: Arc::new(JobControl::new()),
        }
    }
}

fn temp_path(final_path: &Path) -> PathBuf {
    let name = final_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    final_path.with_file_name(format!(".{name}.partial"))
}

fn remove_any(path: &Path) -> std::io::Result<()> {
    match std::fs::symlink_metadata(path) {
        Ok(m) if m.is_dir() => std::fs::remove_dir_all(path),
        Ok(_) => std::fs::remove_file(path),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e),
    }
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let tmp = dir.join(format!(".{MANIFEST_FILE}.partial"));
    std::fs::write(&tmp, serde_json::to_vec_pretty(m)?)?;
    std::fs::rename(tmp, dir.join(MANIFEST_FILE))?;
    Ok(())
}

/// Runs one step into temporary paths and renames them into place only
/// when the step succeeds.
fn run_step(step: &PlannedStep, ctx: &Context) -> Result<Value> {
    let temps: Vec<PathBuf> = step.outputs.iter().map(|o| temp_path(o)).collect();
    for (t, o) in temps.iter().zip(&step.outputs) {
        if let Some(parent) = o.parent() {
            std::fs::create_dir_all(parent)?;
        }
        remove_any(t)?;
    }
    let result = ctx.job.check().map_err(CliError::from).and_then(|_| run_op(&step.op, &step.params, &step.inputs, &temps, ctx));
    match result {
        Ok(report) => {
            for (t, o) in temps.iter().zip(&step.outputs) {
                remove_any(o)?;
                std::fs::rename(t, o)?;
            }
            Ok(report)
        }
        Err(e) => {
            for t in &temps {
                let _ = remove_any(t);
            }
            Err(e)
        }
    }
}

/// Validates, then executes the steps in order. A manifest is written to
/// `out_dir` before the first step and updated after each one; on failure
/// earlier outputs stay in place.
pub fn run_pipeline(config: &PipelineConfig, opts: &RunOptions) -> Result<Manifest> {
    run_with_variables(config, opts, &BTreeMap::new())
}

fn run_with_variables(config: &PipelineConfig, opts: &RunOptions, extra: &BTreeMap<String, String>) -> Result<Manifest> {
    let mut resolved = config.clone();
    resolved.apply_overrides(&opts.overrides)?;
    let seed = resolved.seed.unwrap_or(opts.seed);
    let plan = resolved.plan(&opts.base_dir, &opts.out_dir, extra)?;
    std::fs::create_dir_all(&opts.out_dir)?;
    let mut manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        config: config.clone(),
        overrides: opts.overrides.clone(),
        resolved,
        variables: extra.clone(),
        seed,
        threads: rayon::current_num_threads(),
        versions: versions(),
        status: "running".into(),
        steps: Vec::new(),
        error: None,
    };
    write_manifest(&opts.out_dir, &manifest)?;
    let ctx = Context {
        budget: opts.budget,
        seed,
        job: opts.job.clone(),
    };
    for (k, step) in plan.iter().enumerate() {
        log::info!("step {} ({})", step.name, step.op);
        let t0 = Instant::now();
        let result = run_step(step, &ctx);
        let record = |status: &str, report: Value| StepRecord {
            name: step.name.clone(),
            op: step.op.clone(),
            status: status.into(),
            seconds: t0.elapsed().as_secs_f64(),
            report,
        };
        match result {
            Ok(report) => {
                manifest.steps.push(record("done", report));
                opts.job.set_progress((k + 1) as f64 / plan.len() as f64);
                write_manifest(&opts.out_dir, &manifest)?;
            }
            Err(e) => {
                let err = CliError::Step {
                    step: step.name.clone(),
                    op: step.op.clone(),
                    source: Box::new(e),
                };
                let status = if err.is_cancelled() { "cancelled" } else { "failed" };
                manifest.steps.push(record(status, Value::Null));
                manifest.status = status.into();
                manifest.error = Some(err.to_json());
                write_manifest(&opts.out_dir, &manifest)?;
                return Err(err);
            }
        }
    }
    manifest.status = "done".into();
    write_manifest(&opts.out_dir, &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStatus {
    pub dataset: String,
    pub output: PathBuf,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BulkSummary {
    pub done: usize,
    pub failed: usize,
    pub datasets: Vec<DatasetStatus>,
}

/// Output directory names from dataset file names, made unique.
fn output_names(datasets: &[String]) -> Vec<String> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    datasets
        .iter()
        .map(|d| {
            let stem = Path::new(d)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| "dataset".into());
            let n = seen.entry(stem.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                stem
            } else {
                format!("{stem}-{n}")
            }
        })
        .collect()
}

/// Runs the pipeline once per dataset, each into `out_dir/<dataset name>`,
/// with up to `concurrency` runs at a time. Failures are recorded and do
/// not stop the other runs. `summary.json` is written to `out_dir`.
pub fn run_bulk(config: &PipelineConfig, datasets: &[String], opts: &RunOptions, concurrency: usize) -> Result<BulkSummary> {
    if datasets.is_empty() {
        return Err(CliError::Config("bulk run needs at least one dataset".into()));
    }
    let mut checked = config.clone();
    checked.apply_overrides(&opts.overrides)?;
    checked.validate_structure()?;
    std::fs::create_dir_all(&opts.out_dir)?;
    let names = output_names(datasets);
    let results: Mutex<Vec<Option<DatasetStatus>>> = Mutex::new(vec![None; datasets.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..concurrency.clamp(1, datasets.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= datasets.len() {
                    break;
                }
                let dataset_path = opts.base_dir.join(&datasets[i]);
                let out = opts.out_dir.join(&names[i]);
                let run_opts = RunOptions {
                    out_dir: out.clone(),
                    job: Arc::new(JobControl::new()),
                    ..opts.clone()
                };
                let vars = BTreeMap::from([
                    ("dataset".to_string(), dataset_path.display().to_string()),
                    ("dataset_name".to_string(), names[i].clone()),
                ]);
                let status = match run_with_variables(config, &run_opts, &vars) {
                    Ok(_) => DatasetStatus {
                        dataset: datasets[i].clone(),
                        output: out,
                        status: "done".into(),
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("{}: {e}", datasets[i]);
                        DatasetStatus {
                            dataset: datasets[i].clone(),
                            output: out,
                            status: "failed".into(),
                            error: Some(e.to_json()),
                        }
                    }
                };
                results.lock().expect("results lock")[i] = Some(status);
            });
        }
    });
    let datasets: Vec<DatasetStatus> = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|s| s.expect("every dataset ran"))
        .collect();
    let done = datasets.iter().filter(|s| s.status == "done").count();
    let summary = BulkSummary {
        done,
        failed: datasets.len() - done,
        datasets,
    };
    std::fs::write(opts.out_dir.join(SUMMARY_FILE), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}
