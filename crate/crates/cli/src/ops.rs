//! Named operations shared by the pipeline runner and the subcommands.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use voxstream::cca::{self, ComponentTable, Connectivity};
use voxstream::filters::FilterRegistry;
use voxstream::octree::{build_octree_uncached, BrickOctree};
use voxstream::quantify::{compare, volume_stats, CompareMode, CompareOptions};
use voxstream::random_walker::{binarize_probability, rw_solve_incore, LabelSet, RwParams};
use voxstream::render::{render, Camera, RenderSettings, TransferFunctions};
use voxstream::vesselness::{vesselness, VesselnessParams};
use voxstream::volume::{import_tiff_stack, SliceVolume};
use voxstream::JobControl;

use crate::error::{CliError, Result};

/// Per-run settings visible to every operation.
#[derive(Clone, Debug)]
pub struct Context {
    pub budget: usize,
    pub seed: u64,
    pub job: Arc<JobControl>,
}

impl Default for Context {
    fn default() -> Self {
        Context {
            budget: crate::DEFAULT_BUDGET,
            seed: 0,
            job: Arc::new(JobControl::new()),
        }
    }
}

/// Allowed `(min, max)` numbers of inputs and outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arity {
    pub inputs: (usize, usize),
    pub outputs: (usize, usize),
}

const fn arity(i: (usize, usize), o: (usize, usize)) -> Arity {
    Arity { inputs: i, outputs: o }
}

pub const OPS: &[&str] = &[
    "import",
    "filter",
    "vesselness",
    "cca",
    "filter_components",
    "fill_cavities",
    "csv",
    "octree",
    "segment",
    "quantify",
    "stats",
    "render",
];

/// Arity of `op`, or `None` when no such operation exists. Every
/// registered filter name is also an operation.
pub fn op_arity(op: &str) -> Option<Arity> {
    Some(match op {
        "import" | "filter" | "vesselness" | "filter_components" | "fill_cavities" | "csv" | "octree" | "stats" => {
            arity((1, 1), (1, 1))
        }
        "cca" => arity((1, 1), (1, 2)),
        "segment" => arity((2, 2), (1, 2)),
        "quantify" | "render" => arity((2, 2), (1, 1)),
        name if FilterRegistry::with_builtins().contains(name) => arity((1, 1), (1, 1)),
        _ => return None,
    })
}

fn params<T: DeserializeOwned>(op: &str, v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| CliError::Config(format!("parameters of {op}: {e}")))
}

fn connectivity(v: u8) -> Result<Connectivity> {
    Ok(Connectivity::try_from(v)?)
}

fn default_connectivity() -> u8 {
    26
}

fn write_table(table: &ComponentTable, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => table.write_csv(path)?,
        _ => table.write_json(path)?,
    }
    Ok(())
}

/// Runs `op` reading `inputs` and writing `outputs`. Returns a small JSON
/// report for the run manifest.
pub fn run_op(op: &str, p: &Value, inputs: &[PathBuf], outputs: &[PathBuf], ctx: &Context) -> Result<Value> {
    let a = op_arity(op).ok_or_else(|| CliError::Config(format!("unknown operation {op:?}")))?;
    let count_ok = |n: usize, (lo, hi): (usize, usize)| n >= lo && n <= hi;
    if !count_ok(inputs.len(), a.inputs) || !count_ok(outputs.len(), a.outputs) {
        return Err(CliError::Config(format!(
            "{op} takes {:?} inputs and {:?} outputs, got {} and {}",
            a.inputs,
            a.outputs,
            inputs.len(),
            outputs.len()
        )));
    }
    let job = Some(ctx.job.as_ref());
    let p = if p.is_null() { &json!({}) } else { p };
    match op {
        "import" => {
            let v = import_tiff_stack(&inputs[0], &outputs[0])?;
            Ok(json!({ "dimensions": v.meta().dimensions, "dtype": v.meta().dtype }))
        }
        "filter" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {
                stack: Vec<Value>,
            }
            let P { stack } = params(op, p)?;
            run_stack(&stack, &inputs[0], &outputs[0], ctx)
        }
        "vesselness" => {
            let mut p = p.clone();
            if p.get("scales").is_none() {
                p["scales"] = json!(VesselnessParams::default().scales);
            }
            let vp: VesselnessParams = params(op, &p)?;
            vesselness(&SliceVolume::open(&inputs[0])?, &vp, &outputs[0], job)?;
            Ok(json!({ "scales": vp.scales }))
        }
        "cca" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {
                #[serde(default = "default_connectivity")]
                connectivity: u8,
            }
            let P { connectivity: c } = params(op, p)?;
            let (_, table) = cca::label_components(&SliceVolume::open(&inputs[0])?, connectivity(c)?, &outputs[0], job)?;
            if let Some(path) = outputs.get(1) {
                write_table(&table, path)?;
            }
            Ok(json!({ "components": table.len() }))
        }
        "filter_components" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {
                #[serde(default = "default_connectivity")]
                connectivity: u8,
                min_voxels: u64,
            }
            let P { connectivity: c, min_voxels } = params(op, p)?;
            cca::filter_components(&SliceVolume::open(&inputs[0])?, connectivity(c)?, min_voxels, &outputs[0], job)?;
            Ok(json!({}))
        }
        "fill_cavities" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {
                #[serde(default)]
                connectivity: Option<u8>,
            }
            let P { connectivity: c } = params(op, p)?;
            cca::fill_cavities(&SliceVolume::open(&inputs[0])?, connectivity(c.unwrap_or(6))?, &outputs[0], job)?;
            Ok(json!({}))
        }
        "csv" => {
            let components = serde_json::from_slice(&std::fs::read(&inputs[0])?)
                .map_err(|e| CliError::Config(format!("{}: not a component table: {e}", inputs[0].display())))?;
            let table = ComponentTable { components };
            table.write_csv(&outputs[0])?;
            Ok(json!({ "rows": table.len() }))
        }
        "octree" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {
                #[serde(default = "default_brick")]
                brick_size: usize,
            }
            let P { brick_size } = params(op, p)?;
            let meta = build_octree_uncached(&SliceVolume::open(&inputs[0])?, brick_size, &outputs[0])?;
            Ok(json!({ "levels": meta.level_count, "brick_size": meta.brick_size }))
        }
        "segment" => {
            #[derive(Deserialize)]
            struct P {
                #[serde(default = "half")]
                threshold: f32,
                #[serde(flatten)]
                rw: RwParams,
            }
            let P { threshold, rw } = params(op, p)?;
            let labels = LabelSet::load(&inputs[1])?;
            let prob = rw_solve_incore(&SliceVolume::open(&inputs[0])?, &labels, &rw, &outputs[0])?;
            if let Some(mask) = outputs.get(1) {
                binarize_probability(&prob, threshold, mask)?;
            }
            Ok(json!({ "foreground_seeds": labels.foreground.len(), "background_seeds": labels.background.len() }))
        }
        "quantify" => {
            let opts = compare_options(op, p)?;
            let report = compare(&SliceVolume::open(&inputs[0])?, &SliceVolume::open(&inputs[1])?, opts)?;
            report.write_json(&outputs[0])?;
            Ok(serde_json::to_value(&report)?)
        }
        "stats" => {
            let stats = volume_stats(&mut SliceVolume::open(&inputs[0])?)?;
            let v = serde_json::to_value(&stats)?;
            std::fs::write(&outputs[0], serde_json::to_vec_pretty(&v)?)?;
            Ok(json!({ "channels": stats.len() }))
        }
        "render" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {
                camera: Camera,
                #[serde(default)]
                settings: RenderSettings,
            }
            let P { camera, settings } = params(op, p)?;
            let octree = BrickOctree::open(&inputs[0], ctx.budget)?;
            let tfs = TransferFunctions::load(&inputs[1])?;
            render(&octree, &camera, &tfs.channels, &settings)?.save_png(&outputs[0])?;
            Ok(json!({ "size": camera.size }))
        }
        name => {
            let mut spec = p.clone();
            spec["filter"] = json!(name);
            run_stack(&[spec], &inputs[0], &outputs[0], ctx)
        }
    }
}

fn default_brick() -> usize {
    32
}

fn half() -> f32 {
    0.5
}

pub fn compare_options(op: &str, p: &Value) -> Result<CompareOptions> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct P {
        #[serde(default)]
        mode: CompareMode,
        #[serde(default)]
        normalized: bool,
        #[serde(default)]
        histogram: bool,
    }
    let P { mode, normalized, histogram } = params(op, p)?;
    Ok(CompareOptions {
        mode,
        normalized,
        histogram,
    })
}

pub fn run_stack(stack: &[Value], input: &Path, output: &Path, ctx: &Context) -> Result<Value> {
    let stack = FilterRegistry::with_builtins().build_stack(stack)?;
    let run = stack.run(&SliceVolume::open(input)?, output, Some(ctx.job.as_ref()))?;
    Ok(json!({ "window_high_water": run.window_high_water }))
}
