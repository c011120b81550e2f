//! End-to-end denoising runs: the step loop, run reports and run
//! comparison.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{KernelError, RunError};
use crate::executor::{Engine, ExecConfig, ExecMode, ExecOutput};
use crate::graph::NodeId;
use crate::grouping::{estimate_peak_memory, GroupingConfig, TemporalSlicing};
use crate::kernels::StepCtx;
use crate::memory::MemoryLedger;
use crate::rehash::{build_similarity_map, gamma_for_target, key_step_search, rehash_execute, SimilarityMap, StepSchedule};
use crate::tensor::{max_abs_diff, max_rel_error, Dtype, Scalar, Tensor};
use crate::unet::{build_toy_unet, UNetConfig, FINAL_UP_PROBE};

/// Mixed into the run seed for the initial latent so it is not drawn from
/// the same stream as the weights.
const LATENT_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    #[default]
    Reference,
    Slicedloop,
    Pipelined,
    Naiveclip,
}

impl RunMode {
    pub const ALL: [RunMode; 4] = [RunMode::Reference, RunMode::Slicedloop, RunMode::Pipelined, RunMode::Naiveclip];

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Reference => "reference",
            RunMode::Slicedloop => "slicedloop",
            RunMode::Pipelined => "pipelined",
            RunMode::Naiveclip => "naiveclip",
        }
    }

    pub fn parse(s: &str) -> Option<RunMode> {
        RunMode::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseRunConfig {
    /// Network shape, step count and seed.
    pub unet: UNetConfig,
    pub mode: RunMode,
    /// Frames per chunk in `naiveclip` mode.
    pub naive_chunk: usize,
    pub spatial_k: usize,
    pub temporal: TemporalSlicing,
    /// Present only for step rehash runs.
    pub schedule: Option<StepSchedule>,
    /// Weight of the conditional half when `cfg_doubling` is on.
    pub guidance_scale: f64,
    pub dtype: Dtype,
}

impl Default for DenoiseRunConfig {
    fn default() -> Self {
        DenoiseRunConfig {
            unet: UNetConfig::default(),
            mode: RunMode::Reference,
            naive_chunk: 2,
            spatial_k: 8,
            temporal: TemporalSlicing::default(),
            schedule: None,
            guidance_scale: 7.5,
            dtype: Dtype::F32,
        }
    }
}

impl DenoiseRunConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::InvalidConfig(m.to_string()));
        if self.spatial_k == 0 {
            return bad("spatial-k must be ≥ 1");
        }
        if let TemporalSlicing::Fixed { k_h, k_w } = self.temporal {
            if k_h == 0 {
                return bad("temporal-kh must be ≥ 1");
            }
            if k_w == 0 {
                return bad("temporal-kw must be ≥ 1");
            }
        }
        if self.mode == RunMode::Naiveclip && (self.naive_chunk == 0 || self.naive_chunk >= self.unet.frames) {
            return Err(RunError::InvalidConfig(format!(
                "naive-chunk must be in 1..{}, got {}",
                self.unet.frames, self.naive_chunk
            )));
        }
        if !self.guidance_scale.is_finite() {
            return bad("guidance_scale must be finite");
        }
        self.unet.validate()?;
        if let Some(s) = &self.schedule {
            s.validate()?;
            if s.k != self.unet.steps {
                return Err(crate::error::RehashError::ScheduleMismatch { schedule: s.k, run: self.unet.steps }.into());
            }
        }
        Ok(())
    }

    pub fn exec_config(&self) -> ExecConfig {
        let mode = match self.mode {
            RunMode::Reference => ExecMode::Reference,
            RunMode::Slicedloop => ExecMode::SlicedLoop,
            RunMode::Pipelined => ExecMode::Pipelined,
            RunMode::Naiveclip => ExecMode::NaiveClip { chunk: self.naive_chunk },
        };
        ExecConfig { mode, grouping: GroupingConfig { spatial_k: self.spatial_k, temporal: self.temporal } }
    }

    /// Step size of the synthetic update `x ← x − α_s f(x, s)`.
    pub fn alpha(&self, step: usize) -> f64 {
        0.08 * (1.0 - step as f64 / self.unet.steps as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCount {
    pub step: usize,
    pub key: bool,
    pub donor: Option<usize>,
    pub executed: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub label: String,
    pub mean_adjacent: Option<f64>,
    pub min_adjacent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySummary {
    /// Always `"cosine"`: flattened cosine similarity.
    pub metric: String,
    /// How the map was obtained.
    pub source: String,
    pub probes: Vec<ProbeSummary>,
}

impl SimilaritySummary {
    pub fn from_maps(maps: &[SimilarityMap]) -> Self {
        SimilaritySummary {
            metric: "cosine".into(),
            source: "calibration run without step skipping, same seed".into(),
            probes: maps
                .iter()
                .map(|m| ProbeSummary {
                    label: m.probe_label.clone(),
                    mean_adjacent: m.mean_adjacent(),
                    min_adjacent: m.min_adjacent(),
                })
                .collect(),
        }
    }
}

/// Summary of one denoising run. Fields that do not apply are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: RunMode,
    pub dtype: Dtype,
    pub steps: usize,
    pub seed: u64,
    pub spatial_k: Option<usize>,
    pub temporal: Option<TemporalSlicing>,
    /// Largest ledger peak over all steps.
    pub peak_bytes: usize,
    /// Static model's prediction for one full evaluation.
    pub static_peak_bytes: Option<usize>,
    /// Ledger events in the step with the largest peak.
    pub ticks: usize,
    pub pipeline_ticks: Option<usize>,
    pub wall_ms: f64,
    pub phase_ms: BTreeMap<String, f64>,
    pub output_checksum: String,
    /// Filled in when the run is compared with a reference.
    pub max_rel_error: Option<f64>,
    pub node_evals: usize,
    pub full_node_evals: usize,
    pub op_counts: Vec<StepCount>,
    pub schedule: Option<StepSchedule>,
    pub similarity_summary: Option<SimilaritySummary>,
}

#[derive(Debug, Clone)]
pub struct DenoiseRun<T> {
    pub output: Tensor<T>,
    pub report: RunReport,
    /// Per-step values of each captured probe label.
    pub traces: BTreeMap<String, Vec<Tensor<T>>>,
    /// Ledger of the step with the largest peak.
    pub peak_ledger: MemoryLedger,
}

impl<T: Scalar> DenoiseRun<T> {
    pub fn similarity_maps(&self) -> Result<Vec<SimilarityMap>, RunError> {
        self.traces
            .iter()
            .map(|(label, trace)| Ok(build_similarity_map(trace, label)?))
            .collect()
    }
}

/// Seeded initial latent for a config.
pub fn initial_latent<T: Scalar>(cfg: &UNetConfig) -> Tensor<T> {
    Tensor::randn(cfg.latent_shape(), cfg.seed ^ LATENT_SEED_SALT)
}

/// Runs the denoising loop. `capture` names graph nodes whose per-step
/// values are returned as traces; capturing requires every step to run in
/// full.
pub fn run_denoise<T: Scalar>(cfg: &DenoiseRunConfig, capture: &[&str]) -> Result<DenoiseRun<T>, RunError> {
    cfg.validate()?;
    if T::DTYPE != cfg.dtype {
        return Err(RunError::InvalidConfig(format!("dtype is {} but the run was started as {}", cfg.dtype, T::DTYPE)));
    }
    let started = Instant::now();
    let (graph, weights) = build_toy_unet(&cfg.unet)?;
    let engine = Engine::<T>::new(graph, &weights)?;
    let graph = engine.graph();
    let exec = cfg.exec_config();
    let k = cfg.unet.steps;
    let full_count = graph.compute_node_count();

    let schedule = cfg.schedule.clone();
    let skipping = schedule.as_ref().is_some_and(|s| s.key_steps.len() < k);
    if skipping && !capture.is_empty() {
        return Err(RunError::InvalidConfig("probe traces need every step computed in full".into()));
    }
    let capture_ids: Vec<NodeId> = capture.iter().map(|l| graph.find_label(l)).collect::<Result<_, _>>()?;
    let probe = graph.find_label(FINAL_UP_PROBE)?;
    let tail = if skipping { Some(engine.tail(probe)?) } else { None };
    let mut wanted = capture_ids.clone();
    if skipping {
        wanted.push(probe);
    }

    let grouped = if exec.mode.is_grouped() { Some(engine.group(&exec.grouping)?) } else { None };
    let static_peak = match exec.mode {
        ExecMode::NaiveClip { .. } => None,
        _ => Some(estimate_peak_memory(graph, grouped.as_ref(), T::DTYPE.size_of())),
    };

    let mut x = initial_latent::<T>(&cfg.unet);
    let mut cache: Option<Tensor<T>> = None;
    let mut traces: BTreeMap<String, Vec<Tensor<T>>> = capture.iter().map(|l| (l.to_string(), Vec::new())).collect();
    let mut op_counts = Vec::with_capacity(k);
    let mut peak_ledger = MemoryLedger::new();
    let mut phase_ms = BTreeMap::new();
    let mut node_evals = 0;
    let mut pipeline_ticks = 0;

    for step in 0..k {
        let ctx = StepCtx { step };
        let key = schedule.as_ref().is_none_or(|s| s.is_key(step));
        let run: ExecOutput<T> = if key {
            let input = if cfg.unet.cfg_doubling { Tensor::cat_b(&[&x, &x])? } else { x.clone() };
            let mut run = engine.execute(&exec, &input, ctx, &wanted)?;
            for (id, value) in run.captured.drain(..) {
                if id == probe && skipping {
                    cache = Some(value.clone());
                }
                if let Some(pos) = capture_ids.iter().position(|&c| c == id) {
                    traces.get_mut(capture[pos]).expect("trace exists").push(value);
                }
            }
            run
        } else {
            let cached = cache.as_ref().expect("step 0 is always a key step");
            tail.as_ref().expect("tail exists when skipping").execute(&exec, cached, ctx, &[])?
        };
        let eps = guide(&run.output, cfg)?;
        x.sub_scaled(&eps, T::of(cfg.alpha(step)))?;
        if !x.is_finite() {
            return Err(crate::error::ExecError::NonFinite(format!("step {step}")).into());
        }
        op_counts.push(StepCount {
            step,
            key,
            donor: schedule.as_ref().and_then(|s| s.donor(step)),
            executed: run.node_evals,
            skipped: full_count.saturating_sub(run.node_evals),
        });
        node_evals += run.node_evals;
        pipeline_ticks += run.pipeline_ticks;
        for (phase, ms) in &run.timing.phases {
            *phase_ms.entry(phase.clone()).or_insert(0.0) += ms;
        }
        if run.ledger.peak_bytes() > peak_ledger.peak_bytes() {
            peak_ledger = run.ledger;
        }
    }

    let report = RunReport {
        mode: cfg.mode,
        dtype: T::DTYPE,
        steps: k,
        seed: cfg.unet.seed,
        spatial_k: exec.mode.is_grouped().then_some(cfg.spatial_k),
        temporal: exec.mode.is_grouped().then_some(cfg.temporal),
        peak_bytes: peak_ledger.peak_bytes(),
        static_peak_bytes: static_peak,
        ticks: peak_ledger.ticks(),
        pipeline_ticks: (exec.mode == ExecMode::Pipelined).then_some(pipeline_ticks),
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        phase_ms,
        output_checksum: x.checksum(),
        max_rel_error: None,
        node_evals,
        full_node_evals: full_count * k,
        op_counts,
        schedule,
        similarity_summary: None,
    };
    let mut out = DenoiseRun { output: x, report, traces, peak_ledger };
    if !capture.is_empty() {
        out.report.similarity_summary = Some(SimilaritySummary::from_maps(&out.similarity_maps()?));
    }
    Ok(out)
}

/// Splits a doubled batch into unconditional and conditional halves and
/// combines them as `u + g (c − u)`. Without doubling the output is used
/// as is.
fn guide<T: Scalar>(out: &Tensor<T>, cfg: &DenoiseRunConfig) -> Result<Tensor<T>, KernelError> {
    if !cfg.unet.cfg_doubling {
        return Ok(out.clone());
    }
    let b = cfg.unet.batch;
    let mut u = out.narrow_b(0, b)?;
    let c = out.narrow_b(b, b)?;
    let g = T::of(cfg.guidance_scale);
    for (x, &y) in u.data_mut().iter_mut().zip(c.data()) {
        *x = *x + g * (y - *x);
    }
    Ok(u)
}

/// How the key steps of a rehash run are chosen from a similarity map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeySelector {
    Gamma(f64),
    TargetCount(usize),
}

/// Full run and step-rehash run of the same config.
#[derive(Debug, Clone)]
pub struct CalibratedRehash<T> {
    pub full: DenoiseRun<T>,
    pub rehash: DenoiseRun<T>,
    pub similarity: SimilarityMap,
}

/// Runs `cfg` in full while tracing the final up block's temporal layer,
/// picks key steps from the resulting similarity map and reruns with
/// skipping. The rehash report carries the similarity summary and its
/// error against the full run.
pub fn calibrated_rehash<T: Scalar>(cfg: &DenoiseRunConfig, select: KeySelector) -> Result<CalibratedRehash<T>, RunError> {
    if let KeySelector::Gamma(g) = select {
        crate::rehash::check_gamma(g)?;
    }
    let base = DenoiseRunConfig { schedule: None, ..cfg.clone() };
    let full = run_denoise::<T>(&base, &[FINAL_UP_PROBE])?;
    let similarity = build_similarity_map(&full.traces[FINAL_UP_PROBE], FINAL_UP_PROBE)?;
    let schedule = match select {
        KeySelector::Gamma(g) => key_step_search(&similarity, g, cfg.unet.steps)?,
        KeySelector::TargetCount(n) => gamma_for_target(&similarity, n)?,
    };
    let mut rehash = rehash_execute::<T>(&base, &schedule)?;
    rehash.report.max_rel_error = Some(max_rel_error(&rehash.output, &full.output)?);
    rehash.report.similarity_summary = Some(SimilaritySummary::from_maps(std::slice::from_ref(&similarity)));
    Ok(CalibratedRehash { full, rehash, similarity })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub baseline: RunMode,
    pub candidate: RunMode,
    pub max_abs_error: f64,
    /// Max absolute error over the baseline's largest magnitude.
    pub max_rel_error: f64,
    /// `None` when the outputs are identical.
    pub psnr_db: Option<f64>,
    /// Candidate peak over baseline peak.
    pub peak_ratio: f64,
    pub wall_ratio: f64,
}

pub fn compare_runs<T: Scalar>(
    baseline: (&RunReport, &Tensor<T>),
    candidate: (&RunReport, &Tensor<T>),
) -> Result<CompareReport, KernelError> {
    let (ra, a) = baseline;
    let (rb, b) = candidate;
    let max_abs_error = max_abs_diff(b, a)?;
    let scale = a.max_abs().widen();
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.widen() - y.widen()).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    let ratio = |x: f64, y: f64| if y == 0.0 { 1.0 } else { x / y };
    Ok(CompareReport {
        baseline: ra.mode,
        candidate: rb.mode,
        max_abs_error,
        max_rel_error: if scale == 0.0 { max_abs_error } else { max_abs_error / scale },
        psnr_db: (mse > 0.0).then(|| 10.0 * (scale * scale / mse).log10()),
        peak_ratio: ratio(rb.peak_bytes as f64, ra.peak_bytes as f64),
        wall_ratio: ratio(rb.wall_ms, ra.wall_ms),
    })
}
