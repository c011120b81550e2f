use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use slicewise::error::RunError;
use slicewise::grouping::{GroupingConfig, TemporalSlicing};
use slicewise::harness::{
    calibrated_rehash, compare_runs, run_denoise, DenoiseRun, DenoiseRunConfig, KeySelector, RunMode, RunReport,
    SimilaritySummary,
};
use slicewise::rehash::{check_gamma, gamma_for_target, key_step_search, SimilarityMap, StepSchedule};
use slicewise::tensor::{Dtype, Scalar};
use slicewise::unet::{build_toy_unet, FINAL_UP_PROBE};

const CONFIG_SCHEMA: &str = include_str!("../../../docs/schemas/config.schema.json");

#[derive(Parser)]
#[command(name = "slicewise", version, about = "Sliced, grouped and step-skipping execution of a toy video U-Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the denoising loop once and write report.json.
    Run(RunArgs),
    /// Run several modes on the same config and write compare.json.
    Compare(CompareArgs),
    /// Trace probe layers over a full run and write similarity maps.
    Similarity(SimilarityArgs),
    /// Pick key steps from a similarity CSV and write schedule.json.
    SearchSteps(SearchArgs),
    /// Write the graph, groups, rehash tail, weights and a memory timeline.
    Profile(ProfileArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for all outputs; created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<RunMode>,
    #[arg(long)]
    spatial_k: Option<usize>,
    #[arg(long, requires = "temporal_kw")]
    temporal_kh: Option<usize>,
    #[arg(long, requires = "temporal_kh")]
    temporal_kw: Option<usize>,
    #[arg(long)]
    naive_chunk: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_dtype)]
    dtype: Option<Dtype>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("rehash").args(["gamma", "target_count", "key_steps"])))]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Skip steps using key steps searched at this threshold.
    #[arg(long)]
    gamma: Option<f64>,
    /// Skip steps using the largest threshold that keeps this many key steps.
    #[arg(long)]
    target_count: Option<usize>,
    /// Skip steps using these key steps, e.g. `0,4,8,24`.
    #[arg(long, value_delimiter = ',')]
    key_steps: Option<Vec<usize>>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    /// Modes to run; the first is the baseline.
    #[arg(long, value_delimiter = ',', value_parser = parse_mode, default_value = "reference,slicedloop,pipelined")]
    modes: Vec<RunMode>,
}

#[derive(Args)]
struct SimilarityArgs {
    #[command(flatten)]
    common: Common,
    /// Node label to trace; repeatable.
    #[arg(long = "probe", default_value = FINAL_UP_PROBE)]
    probes: Vec<String>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("select").args(["gamma", "target_count"]).required(true)))]
struct SearchArgs {
    /// Similarity CSV as written by `similarity`.
    #[arg(long)]
    similarity: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    target_count: Option<usize>,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    common: Common,
}

fn parse_mode(s: &str) -> Result<RunMode, String> {
    RunMode::parse(s).ok_or_else(|| format!("unknown mode {s:?}; expected reference, slicedloop, pipelined or naiveclip"))
}

fn parse_dtype(s: &str) -> Result<Dtype, String> {
    match s {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        _ => Err(format!("unknown dtype {s:?}; expected f32 or f64")),
    }
}

enum Failure {
    Validation(String),
    Runtime(anyhow::Error),
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Similarity(a) => cmd_similarity(a),
        Command::SearchSteps(a) => cmd_search_steps(a),
        Command::Profile(a) => cmd_profile(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Reads, schema-checks and deserialises a config file.
fn load_config(path: &Path) -> Result<DenoiseRunConfig, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Validation(format!("{}: not valid JSON: {e}", path.display())))?;
    let schema: Value = serde_json::from_str(CONFIG_SCHEMA).expect("bundled schema is valid JSON");
    let compiled = jsonschema::JSONSchema::compile(&schema).expect("bundled schema compiles");
    if let Err(errors) = compiled.validate(&value) {
        let msgs: Vec<String> = errors
            .map(|e| {
                let at = e.instance_path.to_string();
                format!("{}: {e}", if at.is_empty() { "/".to_string() } else { at })
            })
            .collect();
        return Err(Failure::Validation(format!("{}: {}", path.display(), msgs.join("; "))));
    }
    serde_json::from_value(value).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

impl Common {
    fn resolve(&self) -> Result<DenoiseRunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => DenoiseRunConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(k) = self.spatial_k {
            cfg.spatial_k = k;
        }
        if let (Some(k_h), Some(k_w)) = (self.temporal_kh, self.temporal_kw) {
            cfg.temporal = TemporalSlicing::Fixed { k_h, k_w };
        }
        if let Some(c) = self.naive_chunk {
            cfg.naive_chunk = c;
        }
        if let Some(s) = self.steps {
            cfg.unet.steps = s;
        }
        if let Some(s) = self.seed {
            cfg.unet.seed = s;
        }
        if let Some(d) = self.dtype {
            cfg.dtype = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> anyhow::Result<&Path> {
        prepare_out(&self.out)
    }
}

fn prepare_out(out: &Path) -> anyhow::Result<&Path> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(dir: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// Calls `$body` with `$t` bound to the scalar type named by `$dtype`.
macro_rules! with_dtype {
    ($dtype:expr, $t:ident => $body:expr) => {
        match $dtype {
            Dtype::F32 => {
                type $t = f32;
                $body
            }
            Dtype::F64 => {
                type $t = f64;
                $body
            }
        }
    };
}

fn cmd_run(a: RunArgs) -> CmdResult {
    let mut cfg = a.common.resolve()?;
    let out = a.common.out_dir()?;
    let select = match (a.gamma, a.target_count) {
        (Some(g), _) => Some(KeySelector::Gamma(g)),
        (_, Some(n)) => Some(KeySelector::TargetCount(n)),
        _ => None,
    };
    if let Some(steps) = a.key_steps {
        cfg.schedule = Some(StepSchedule::new(cfg.unet.steps, steps, None).map_err(RunError::from)?);
        cfg.validate()?;
    }
    let report = with_dtype!(cfg.dtype, T => run_one::<T>(&cfg, select, out)?);
    println!(
        "{} peak_bytes={} wall_ms={:.1} node_evals={}/{} checksum={}",
        report.mode.name(),
        report.peak_bytes,
        report.wall_ms,
        report.node_evals,
        report.full_node_evals,
        report.output_checksum
    );
    if let Some(e) = report.max_rel_error {
        println!("max_rel_error vs full run: {e:.3e}");
    }
    write_json(out, "report.json", &report)?;
    Ok(())
}

fn run_one<T: Scalar>(cfg: &DenoiseRunConfig, select: Option<KeySelector>, out: &Path) -> Result<RunReport, Failure> {
    let Some(select) = select else {
        return Ok(run_denoise::<T>(cfg, &[])?.report);
    };
    let cal = calibrated_rehash::<T>(cfg, select)?;
    write_text(out, "similarity.csv", &cal.similarity.export_csv())?;
    write_json(out, "schedule.json", cal.rehash.report.schedule.as_ref().expect("rehash runs carry a schedule"))?;
    Ok(cal.rehash.report)
}

#[derive(Serialize)]
struct CompareRow {
    mode: RunMode,
    peak_bytes: usize,
    static_peak_bytes: Option<usize>,
    wall_ms: f64,
    output_checksum: String,
    max_abs_error: f64,
    max_rel_error: f64,
    psnr_db: Option<f64>,
    peak_ratio: f64,
    wall_ratio: f64,
    diverged: bool,
}

fn cmd_compare(a: CompareArgs) -> CmdResult {
    let base_cfg = a.common.resolve()?;
    let out = a.common.out_dir()?;
    let tolerance = match base_cfg.dtype {
        Dtype::F32 => 1e-5,
        Dtype::F64 => 1e-12,
    };
    let rows = with_dtype!(base_cfg.dtype, T => compare_modes::<T>(&base_cfg, &a.modes, tolerance)?);
    println!("{:<11} {:>12} {:>10} {:>12} {:>9}", "mode", "peak_bytes", "wall_ms", "max_rel_err", "diverged");
    for r in &rows {
        println!(
            "{:<11} {:>12} {:>10.1} {:>12.3e} {:>9}",
            r.mode.name(),
            r.peak_bytes,
            r.wall_ms,
            r.max_rel_error,
            r.diverged
        );
    }
    write_json(out, "compare.json", &json!({"baseline": a.modes[0], "tolerance": tolerance, "rows": rows}))?;
    Ok(())
}

fn compare_modes<T: Scalar>(base: &DenoiseRunConfig, modes: &[RunMode], tolerance: f64) -> Result<Vec<CompareRow>, Failure> {
    let mut runs: Vec<DenoiseRun<T>> = Vec::with_capacity(modes.len());
    for &mode in modes {
        let cfg = DenoiseRunConfig { mode, ..base.clone() };
        cfg.validate()?;
        runs.push(run_denoise::<T>(&cfg, &[])?);
    }
    let baseline = &runs[0];
    runs.iter()
        .map(|r| {
            let c = compare_runs((&baseline.report, &baseline.output), (&r.report, &r.output)).map_err(RunError::from)?;
            Ok(CompareRow {
                mode: r.report.mode,
                peak_bytes: r.report.peak_bytes,
                static_peak_bytes: r.report.static_peak_bytes,
                wall_ms: r.report.wall_ms,
                output_checksum: r.report.output_checksum.clone(),
                max_abs_error: c.max_abs_error,
                max_rel_error: c.max_rel_error,
                psnr_db: c.psnr_db,
                peak_ratio: c.peak_ratio,
                wall_ratio: c.wall_ratio,
                diverged: c.max_rel_error > tolerance,
            })
        })
        .collect()
}

fn cmd_similarity(a: SimilarityArgs) -> CmdResult {
    let cfg = DenoiseRunConfig { schedule: None, ..a.common.resolve()? };
    let out = a.common.out_dir()?;
    let labels: Vec<&str> = a.probes.iter().map(String::as_str).collect();
    let maps = with_dtype!(cfg.dtype, T => run_denoise::<T>(&cfg, &labels)?.similarity_maps()?);
    for m in &maps {
        write_text(out, &format!("similarity.{}.csv", m.probe_label), &m.export_csv())?;
        println!("{}: mean adjacent {:?}", m.probe_label, m.mean_adjacent());
    }
    write_json(out, "similarity_summary.json", &SimilaritySummary::from_maps(&maps))?;
    Ok(())
}

fn cmd_search_steps(a: SearchArgs) -> CmdResult {
    if let Some(g) = a.gamma {
        check_gamma(g).map_err(RunError::from)?;
    }
    let text = fs::read_to_string(&a.similarity).with_context(|| format!("reading {}", a.similarity.display()))?;
    let map = SimilarityMap::parse_csv(&text, a.similarity.display().to_string())
        .map_err(|e| Failure::Validation(format!("{}: {e}", a.similarity.display())))?;
    let schedule = match (a.gamma, a.target_count) {
        (Some(g), _) => key_step_search(&map, g, map.k),
        (_, Some(n)) => gamma_for_target(&map, n),
        _ => unreachable!("clap requires one selector"),
    }
    .map_err(RunError::from)?;
    let out = prepare_out(&a.out)?;
    println!("{} key steps of {}: {:?}", schedule.key_steps.len(), schedule.k, schedule.key_steps);
    write_json(out, "schedule.json", &schedule)?;
    Ok(())
}

fn cmd_profile(a: ProfileArgs) -> CmdResult {
    let cfg = a.common.resolve()?;
    let out = a.common.out_dir()?;
    let (graph, weights) = build_toy_unet(&cfg.unet).map_err(RunError::from)?;
    let elem = cfg.dtype.size_of();
    write_json(out, "graph.json", &graph.to_json())?;
    let grouping = GroupingConfig { spatial_k: cfg.spatial_k, temporal: cfg.temporal };
    let grouped = slicewise::grouping::group_operators(&graph, &grouping).map_err(RunError::from)?;
    write_json(out, "groups.json", &grouped.report(&graph, elem))?;
    let probe = graph.find_label(FINAL_UP_PROBE).map_err(RunError::from)?;
    let (tail, origin) = graph.tail_from(probe).map_err(RunError::from)?;
    let tail_doc = json!({
        "probe": FINAL_UP_PROBE,
        "probe_id": probe,
        "node_count": tail.compute_node_count(),
        "labels": tail.nodes().iter().map(|n| n.label.clone()).collect::<Vec<_>>(),
        "origin": origin,
        "graph": tail.to_json(),
    });
    write_json(out, "tail.json", &tail_doc)?;
    let mut file = fs::File::create(out.join("weights.bin")).context("creating weights.bin")?;
    weights.write_to(&mut file).context("writing weights.bin")?;

    let run = with_dtype!(cfg.dtype, T => profile_run::<T>(&cfg)?);
    write_text(out, &format!("timeline.{}.csv", cfg.mode.name()), &run.1)?;
    write_json(out, "report.json", &run.0)?;
    println!(
        "{} groups, {} ungrouped nodes; peak_bytes={} static_peak_bytes={:?}",
        grouped.groups.len(),
        grouped.ungrouped.len(),
        run.0.peak_bytes,
        run.0.static_peak_bytes
    );
    Ok(())
}

fn profile_run<T: Scalar>(cfg: &DenoiseRunConfig) -> Result<(RunReport, String), Failure> {
    let run = run_denoise::<T>(cfg, &[])?;
    Ok((run.report, run.peak_ledger.export_timeline()))
}
