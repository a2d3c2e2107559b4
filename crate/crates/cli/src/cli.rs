//! Argument parsing and subcommand dispatch.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use voxstream::cca::{self, Connectivity};
use voxstream::octree::{build_octree_uncached, BrickOctree};
use voxstream::quantify::{compare, volume_stats, CompareMode, CompareOptions};
use voxstream::random_walker::{binarize_probability, hrw_update, rw_solve_incore, LabelSet, ProbabilityOctree, RwParams};
use voxstream::render::{animate, render, Camera, Compositing, Interpolation, Keyframe, Lod, RenderSettings, TransferFunctions};
use voxstream::vesselness::{vesselness, VesselnessParams};
use voxstream::volume::{import_tiff_stack, SliceVolume};
use voxstream::JobControl;
use voxstream_ensemble::{
    aggregate, distance_matrix, extract_features, extract_parcoords, mds_embed, reembed_selection, scan_ensemble,
    time_histogram_axes, CachePolicy, DistanceMatrix, FeatureMatrix, Sampling, Statistic,
};

use crate::error::{CliError, Result};
use crate::ops::{self, Context};
use crate::pipeline::{load_config, run_bulk, run_pipeline, Override, RunOptions};
use crate::server::{default_work_dir, serve, ServerConfig};

#[derive(Debug, Parser)]
#[command(name = "voxstream", version, about = "Out-of-core volume processing and ensemble exploration")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Cache budget in bytes.
    #[arg(long, global = true, default_value_t = crate::DEFAULT_BUDGET)]
    pub memory_budget: usize,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Print errors as JSON on stderr.
    #[arg(long, global = true)]
    pub json_errors: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Import a directory of TIFF slices as a volume.
    Convert { input: PathBuf, output: PathBuf },
    /// Build a brick octree.
    Octree {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 32)]
        brick_size: usize,
    },
    /// Run a filter stack.
    Filter {
        input: PathBuf,
        output: PathBuf,
        /// JSON file holding an array of filter specs.
        #[arg(long)]
        stack: Option<PathBuf>,
        /// One filter spec as inline JSON, e.g. '{"filter":"gaussian","sigma":1}'. Repeatable.
        #[arg(long = "spec")]
        specs: Vec<String>,
    },
    /// Multi-scale vesselness.
    Vesselness {
        input: PathBuf,
        output: PathBuf,
        /// Scales in mm.
        #[arg(long, value_delimiter = ',', default_values_t = [2.0, 3.0, 4.0])]
        scales: Vec<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        gamma12: Option<f64>,
        #[arg(long)]
        gamma23: Option<f64>,
    },
    /// Connected components: labels, size filtering or cavity filling.
    Cca {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 26)]
        connectivity: u8,
        /// Component table, CSV or JSON by extension.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Keep components with at least this many voxels instead of labelling.
        #[arg(long, conflicts_with = "fill_cavities")]
        min_voxels: Option<u64>,
        /// Fill background regions not connected to the border.
        #[arg(long)]
        fill_cavities: bool,
    },
    /// Random-walker segmentation from seed labels.
    Segment {
        input: PathBuf,
        /// Seed label JSON.
        labels: PathBuf,
        /// Probability volume, or probability octree with --octree.
        output: PathBuf,
        /// Binary mask output.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        /// Solver parameters as a JSON file.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Solve hierarchically over this octree of the input.
        #[arg(long)]
        octree: Option<PathBuf>,
        /// Previous probability octree to update incrementally.
        #[arg(long, requires = "octree")]
        prev: Option<PathBuf>,
    },
    /// Compare two volumes, or summarize one.
    Quantify {
        a: PathBuf,
        b: Option<PathBuf>,
        #[arg(long, default_value = "both")]
        mode: CompareMode,
        #[arg(long)]
        normalized: bool,
        #[arg(long)]
        histogram: bool,
        /// Report file; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Raycast an octree to a PNG.
    Render {
        octree: PathBuf,
        #[arg(long)]
        tf: PathBuf,
        /// Camera JSON.
        #[arg(long)]
        camera: PathBuf,
        #[command(flatten)]
        render: RenderArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an interpolated keyframe animation to numbered PNGs.
    Animate {
        octree: PathBuf,
        #[arg(long)]
        tf: PathBuf,
        /// JSON array of keyframes.
        #[arg(long)]
        keys: PathBuf,
        #[arg(long, default_value_t = 25.0)]
        fps: f64,
        /// Seconds; defaults to the keyframe span.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, default_value = "slerp")]
        interpolation: Interpolation,
        #[command(flatten)]
        render: RenderArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ensemble scanning and aggregation.
    #[command(subcommand)]
    Ensemble(EnsembleCommand),
    /// Similarity features, distance matrices and embeddings.
    #[command(subcommand)]
    Embed(EmbedCommand),
    /// Sample parallel-coordinates data.
    Parcoords {
        root: PathBuf,
        #[arg(long, value_delimiter = ',')]
        fields: Vec<String>,
        #[arg(long, default_value_t = 1024)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        times: usize,
        /// One axis per time step of this field.
        #[arg(long, conflicts_with = "fields")]
        time_field: Option<String>,
        #[arg(long, value_delimiter = ',')]
        members: Vec<String>,
        /// Sample mask volume.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pipeline configs.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Serve the HTTP API for an ensemble.
    Serve {
        root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Work directory; defaults to `<root>/.voxstream`.
        #[arg(long)]
        work: Option<PathBuf>,
        /// Directory of static UI files served at `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        /// Sample positions per feature record.
        #[arg(long, default_value_t = 4096)]
        samples: usize,
        #[arg(long, default_value_t = 32)]
        brick_size: usize,
    },
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long, default_value = "dvr")]
    pub mode: Compositing,
    /// Sampling distance in voxels.
    #[arg(long, default_value_t = 0.5)]
    pub step: f64,
    /// Octree level, or `screen` to pick one from the pixel size.
    #[arg(long, default_value = "0")]
    pub lod: String,
}

impl RenderArgs {
    fn settings(&self) -> Result<RenderSettings> {
        let lod = match self.lod.as_str() {
            "screen" => Lod::Screen,
            s => Lod::Level(s.parse().map_err(|_| CliError::Config(format!("lod {s:?} is neither a level nor \"screen\"")))?),
        };
        Ok(RenderSettings {
            mode: self.mode,
            step: self.step,
            lod,
            ..RenderSettings::default()
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum EnsembleCommand {
    /// Scan an ensemble directory and print its summary.
    Scan {
        root: PathBuf,
        /// Rescan and rewrite the cache.
        #[arg(long)]
        refresh: bool,
        /// Neither read nor write the cache.
        #[arg(long, conflicts_with = "refresh")]
        no_cache: bool,
    },
    /// Voxel-wise mean, variance or standard deviation over runs and steps.
    Aggregate {
        root: PathBuf,
        #[arg(long)]
        field: String,
        #[arg(long, default_value = "mean")]
        stat: Statistic,
        #[arg(long, value_delimiter = ',')]
        members: Vec<String>,
        /// Inclusive time window start in seconds.
        #[arg(long)]
        t0: Option<f64>,
        #[arg(long)]
        t1: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum EmbedCommand {
    /// Sample per-record feature vectors.
    Extract {
        root: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        fields: Vec<String>,
        #[arg(long, default_value_t = 4096, conflicts_with = "exhaustive")]
        samples: usize,
        /// Sample every voxel.
        #[arg(long)]
        exhaustive: bool,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Output directory of `<field>.feat` files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pairwise distances between records, averaged over fields.
    Matrix {
        /// Directory of feature files.
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        fields: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classical MDS of a distance matrix.
    Mds {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Embed only the records of these members.
        #[arg(long, value_delimiter = ',')]
        members: Vec<String>,
        /// JSON output; CSV when the extension is `.csv`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum PipelineCommand {
    /// Run a pipeline config or replay a run manifest.
    Run {
        config: PathBuf,
        /// Override `step.param=value` or set variable `name=value`. Repeatable.
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Run once per dataset; overrides the config's dataset list.
        #[arg(long, num_args = 1..)]
        datasets: Option<Vec<String>>,
        /// Treat the config's dataset list as a bulk run.
        #[arg(long)]
        bulk: bool,
        #[arg(long)]
        out: PathBuf,
        /// Datasets processed at once in bulk runs.
        #[arg(long, default_value_t = 1)]
        concurrency: usize,
    },
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("JSON values serialize"));
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn member_filter(members: &[String]) -> Option<BTreeSet<String>> {
    (!members.is_empty()).then(|| members.iter().cloned().collect())
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            if cli.global.json_errors {
                eprintln!("{}", e.to_json());
            } else {
                eprintln!("error: {e}");
            }
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let ctx = Context {
        budget: g.memory_budget,
        seed: g.seed,
        job: Arc::new(JobControl::new()),
    };
    let job = Some(ctx.job.as_ref());
    match &cli.command {
        Command::Convert { input, output } => {
            let v = import_tiff_stack(input, output)?;
            print_json(&serde_json::to_value(v.meta())?);
        }
        Command::Octree {
            input,
            output,
            brick_size,
        } => {
            let meta = build_octree_uncached(&SliceVolume::open(input)?, *brick_size, output)?;
            print_json(&json!({ "levels": meta.level_count, "brick_size": meta.brick_size }));
        }
        Command::Filter {
            input,
            output,
            stack,
            specs,
        } => {
            let mut all: Vec<Value> = match stack {
                Some(path) => match read_json::<Value>(path)? {
                    Value::Array(a) => a,
                    Value::Object(mut o) => match o.remove("stack") {
                        Some(Value::Array(a)) => a,
                        _ => return Err(CliError::Config(format!("{}: expected an array of filters", path.display()))),
                    },
                    _ => return Err(CliError::Config(format!("{}: expected an array of filters", path.display()))),
                },
                None => Vec::new(),
            };
            for s in specs {
                all.push(serde_json::from_str(s).map_err(|e| CliError::Config(format!("--spec {s}: {e}")))?);
            }
            if all.is_empty() {
                return Err(CliError::Config("no filters given; use --stack or --spec".into()));
            }
            print_json(&ops::run_stack(&all, input, output, &ctx)?);
        }
        Command::Vesselness {
            input,
            output,
            scales,
            alpha,
            gamma12,
            gamma23,
        } => {
            let mut p = VesselnessParams::with_scales(scales.clone());
            p.alpha = alpha.unwrap_or(p.alpha);
            p.gamma12 = gamma12.unwrap_or(p.gamma12);
            p.gamma23 = gamma23.unwrap_or(p.gamma23);
            vesselness(&SliceVolume::open(input)?, &p, output, job)?;
        }
        Command::Cca {
            input,
            output,
            connectivity,
            table,
            min_voxels,
            fill_cavities,
        } => {
            let conn = Connectivity::try_from(*connectivity)?;
            let vol = SliceVolume::open(input)?;
            if *fill_cavities {
                cca::fill_cavities(&vol, conn, output, job)?;
            } else if let Some(min) = min_voxels {
                cca::filter_components(&vol, conn, *min, output, job)?;
            } else {
                let (_, t) = cca::label_components(&vol, conn, output, job)?;
                match table {
                    Some(p) if p.extension().is_some_and(|e| e == "csv") => t.write_csv(p)?,
                    Some(p) => t.write_json(p)?,
                    None => {}
                }
                print_json(&json!({ "components": t.len() }));
            }
        }
        Command::Segment {
            input,
            labels,
            output,
            mask,
            threshold,
            params,
            octree,
            prev,
        } => {
            let labels = LabelSet::load(labels)?;
            let params: RwParams = match params {
                Some(p) => read_json(p)?,
                None => RwParams::default(),
            };
            let prob = match octree {
                Some(dir) => {
                    let tree = BrickOctree::open(dir, g.memory_budget)?;
                    let prev = prev.as_ref().map(|p| ProbabilityOctree::open(p, g.memory_budget)).transpose()?;
                    let (prob, report) = hrw_update(&tree, prev.as_ref(), &labels, &params, output, &ctx.job)?;
                    print_json(&serde_json::to_value(report)?);
                    match mask {
                        Some(_) => Some(prob.reconstruct(output.with_extension("dense"))?),
                        None => None,
                    }
                }
                None => Some(rw_solve_incore(&SliceVolume::open(input)?, &labels, &params, output)?),
            };
            if let (Some(m), Some(prob)) = (mask, prob) {
                binarize_probability(&prob, *threshold, m)?;
            }
        }
        Command::Quantify {
            a,
            b,
            mode,
            normalized,
            histogram,
            out,
        } => {
            let report = match b {
                Some(b) => serde_json::to_value(compare(
                    &SliceVolume::open(a)?,
                    &SliceVolume::open(b)?,
                    CompareOptions {
                        mode: *mode,
                        normalized: *normalized,
                        histogram: *histogram,
                    },
                )?)?,
                None => serde_json::to_value(volume_stats(&mut SliceVolume::open(a)?)?)?,
            };
            match out {
                Some(p) => std::fs::write(p, serde_json::to_vec_pretty(&report)?)?,
                None => print_json(&report),
            }
        }
        Command::Render {
            octree,
            tf,
            camera,
            render: r,
            out,
        } => {
            let tree = BrickOctree::open(octree, g.memory_budget)?;
            let camera: Camera = read_json(camera)?;
            let tfs = TransferFunctions::load(tf)?;
            render(&tree, &camera, &tfs.channels, &r.settings()?)?.save_png(out)?;
        }
        Command::Animate {
            octree,
            tf,
            keys,
            fps,
            duration,
            interpolation,
            render: r,
            out,
        } => {
            let tree = BrickOctree::open(octree, g.memory_budget)?;
            let keys: Vec<Keyframe> = read_json(keys)?;
            let span = match (keys.first(), keys.last()) {
                (Some(a), Some(b)) => b.time - a.time,
                _ => 0.0,
            };
            let tfs = TransferFunctions::load(tf)?;
            let frames = animate(
                &tree,
                &keys,
                &tfs.channels,
                &r.settings()?,
                *interpolation,
                *fps,
                duration.unwrap_or(span),
                out,
                &ctx.job,
            )?;
            print_json(&json!({ "frames": frames.len() }));
        }
        Command::Ensemble(EnsembleCommand::Scan { root, refresh, no_cache }) => {
            let policy = match (refresh, no_cache) {
                (true, _) => CachePolicy::Refresh,
                (_, true) => CachePolicy::Ignore,
                _ => CachePolicy::Use,
            };
            let (ds, report) = scan_ensemble(root, policy, job)?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            print_json(&json!({
                "members": ds.members.iter().map(|m| json!({ "name": m.name, "steps": m.steps.len() })).collect::<Vec<_>>(),
                "total_steps": ds.total_steps(),
                "fields": ds.fields,
                "common_fields": ds.common_fields,
                "common_time_range": ds.common_time_range,
                "union_time_range": ds.union_time_range,
                "from_cache": report.from_cache,
                "warnings": report.warnings,
            }));
        }
        Command::Ensemble(EnsembleCommand::Aggregate {
            root,
            field,
            stat,
            members,
            t0,
            t1,
            out,
        }) => {
            let (ds, _) = scan_ensemble(root, CachePolicy::Use, None)?;
            let window = match (t0, t1) {
                (None, None) => None,
                (a, b) => Some([a.unwrap_or(f64::NEG_INFINITY), b.unwrap_or(f64::INFINITY)]),
            };
            aggregate(&ds, field, member_filter(members).as_ref(), window, *stat, out, job)?;
        }
        Command::Embed(EmbedCommand::Extract {
            root,
            fields,
            samples,
            exhaustive,
            mask,
            out,
        }) => {
            let (ds, _) = scan_ensemble(root, CachePolicy::Use, None)?;
            let sampling = if *exhaustive {
                Sampling::Exhaustive
            } else {
                Sampling::Random {
                    count: *samples,
                    seed: g.seed,
                }
            };
            let mask = mask.as_ref().map(SliceVolume::open).transpose()?;
            let run = extract_features(&ds, fields, sampling, mask.as_ref(), out, job)?;
            print_json(&json!({ "computed": run.computed, "reused": run.reused }));
        }
        Command::Embed(EmbedCommand::Matrix { features, fields, out }) => {
            let matrices = fields
                .iter()
                .map(|f| FeatureMatrix::open(voxstream_ensemble::features::feature_path(features, f)))
                .collect::<voxstream_ensemble::Result<Vec<_>>>()?;
            let d = distance_matrix(&matrices, job)?;
            d.save(out)?;
            print_json(&json!({ "records": d.len() }));
        }
        Command::Embed(EmbedCommand::Mds { matrix, k, members, out }) => {
            let d = DistanceMatrix::load(matrix)?;
            let e = match member_filter(members) {
                Some(set) => reembed_selection(&d, &set, *k)?,
                None => mds_embed(&d, *k)?,
            };
            if out.extension().is_some_and(|x| x == "csv") {
                e.write_csv(out)?;
            } else {
                e.write_json(out)?;
            }
        }
        Command::Parcoords {
            root,
            fields,
            samples,
            times,
            time_field,
            members,
            mask,
            out,
        } => {
            let (ds, _) = scan_ensemble(root, CachePolicy::Use, None)?;
            let mask = mask.as_ref().map(SliceVolume::open).transpose()?;
            let data = match time_field {
                Some(f) => time_histogram_axes(&ds, f, member_filter(members).as_ref(), *samples, g.seed, mask.as_ref(), job)?,
                None => {
                    let fields = if fields.is_empty() { ds.common_fields.clone() } else { fields.clone() };
                    extract_parcoords(&ds, &fields, *samples, *times, g.seed, mask.as_ref(), job)?
                }
            };
            data.save(out)?;
            print_json(&data.summary());
        }
        Command::Pipeline(PipelineCommand::Run {
            config,
            overrides,
            datasets,
            bulk,
            out,
            concurrency,
        }) => {
            let (cfg, mut replayed, seed) = load_config(config)?;
            for o in overrides {
                replayed.push(o.parse::<Override>()?);
            }
            let opts = RunOptions {
                base_dir: config.parent().map(Path::to_path_buf).unwrap_or_default(),
                out_dir: out.clone(),
                overrides: replayed,
                seed: seed.unwrap_or(g.seed),
                budget: g.memory_budget,
                job: ctx.job.clone(),
            };
            let list = datasets.clone().or_else(|| bulk.then(|| cfg.datasets.clone()));
            match list {
                Some(list) => {
                    let summary = run_bulk(&cfg, &list, &opts, *concurrency)?;
                    print_json(&serde_json::to_value(&summary)?);
                    if summary.failed > 0 {
                        return Err(CliError::Step {
                            step: "bulk".into(),
                            op: "pipeline".into(),
                            source: Box::new(CliError::Config(format!("{} of {} datasets failed", summary.failed, list.len()))),
                        });
                    }
                }
                None => {
                    let m = run_pipeline(&cfg, &opts)?;
                    print_json(&json!({ "status": m.status, "steps": m.steps.len() }));
                }
            }
        }
        Command::Serve {
            root,
            bind,
            work,
            static_dir,
            samples,
            brick_size,
        } => {
            let config = ServerConfig {
                root: root.clone(),
                work_dir: work.clone().unwrap_or_else(|| default_work_dir(root)),
                static_dir: static_dir.clone(),
                budget: g.memory_budget,
                seed: g.seed,
                samples: *samples,
                brick_size: *brick_size,
            };
            serve(config, bind)?;
        }
    }
    Ok(())
}
