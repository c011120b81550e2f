//! One check per acceptance criterion on the default toy configuration.
//! Each prints a single PASS/FAIL line; the test fails if any does.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slicewise::harness::{calibrated_rehash, compare_runs, run_denoise, DenoiseRun, DenoiseRunConfig, KeySelector, RunMode};
use slicewise::rehash::{key_step_search, rehash_execute, SimilarityMap, StepSchedule};
use slicewise::slicer::{plan_spatial, plan_temporal, SlicePlan, TileExtents};
use slicewise::tensor::{max_rel_error, Scalar};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn timed<T: Scalar>(cfg: &DenoiseRunConfig) -> (DenoiseRun<T>, f64) {
    let t = Instant::now();
    let run = run_denoise::<T>(cfg, &[]).expect("run succeeds");
    (run, t.elapsed().as_secs_f64())
}

fn mode(mode: RunMode) -> DenoiseRunConfig {
    DenoiseRunConfig { mode, ..DenoiseRunConfig::default() }
}

fn lossless<T: Scalar>(tol: f64) -> (Outcome, Vec<DenoiseRun<T>>) {
    let dtype = T::DTYPE;
    let mut runs = Vec::new();
    let mut worst = 0.0f64;
    let mut slowest = 0.0f64;
    for m in [RunMode::Reference, RunMode::Slicedloop, RunMode::Pipelined] {
        let (run, secs) = timed::<T>(&DenoiseRunConfig { dtype, ..mode(m) });
        slowest = slowest.max(secs);
        runs.push(run);
    }
    for r in &runs[1..] {
        worst = worst.max(max_rel_error(&r.output, &runs[0].output).unwrap());
    }
    let detail = format!("{dtype}: max rel error {worst:.3e} (limit {tol:e}), slowest mode {slowest:.1} s");
    (check(worst <= tol && slowest < 60.0, detail), runs)
}

fn oracle_keys(s: &[Vec<f64>], gamma: f64) -> Vec<usize> {
    let k = s.len();
    let mut keys = vec![0];
    let mut donor = 0;
    for i in 1..k {
        if s[i][donor] < gamma {
            keys.push(i);
            donor = i;
        }
    }
    if *keys.last().unwrap() != k - 1 {
        keys.push(k - 1);
    }
    keys
}

fn a1_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let k = rng.gen_range(1..=32);
        let mut s = vec![vec![1.0; k]; k];
        // bias towards high similarity so schedules of every size occur
        let floor: f64 = rng.gen_range(-1.0..0.99);
        for i in 0..k {
            for j in 0..i {
                let v = rng.gen_range(floor..=1.0);
                s[i][j] = v;
                s[j][i] = v;
            }
        }
        let gamma = rng.gen_range(1e-6..=1.0);
        let map = SimilarityMap::new(s.clone(), "random").unwrap();
        if key_step_search(&map, gamma, k).unwrap().key_steps != oracle_keys(&s, gamma) {
            mismatches += 1;
        }
    }

    let filled = |k: usize, off: f64| -> Vec<Vec<f64>> {
        (0..k).map(|i| (0..k).map(|j| if i == j { 1.0 } else { off }).collect()).collect()
    };
    let search = |s: Vec<Vec<f64>>, g: f64| {
        let k = s.len();
        key_step_search(&SimilarityMap::new(s, "example").unwrap(), g, k).unwrap().key_steps
    };
    let ex1 = search(filled(7, 0.97), 0.95) == vec![0, 6];
    let ex2 = search(filled(5, 0.5), 0.9) == vec![0, 1, 2, 3, 4];
    let mut six = filled(6, 0.0);
    for (i, j, v) in [(1, 0, 0.97), (2, 0, 0.96), (3, 0, 0.90), (4, 3, 0.98), (5, 3, 0.95)] {
        six[i][j] = v;
        six[j][i] = v;
    }
    let ex3 = search(six, 0.95) == vec![0, 3, 5];
    check(
        mismatches == 0 && ex1 && ex2 && ex3,
        format!("{mismatches}/1000 random maps differ from the loop oracle; worked examples {ex1}/{ex2}/{ex3}"),
    )
}

fn rehash_operating_point(full: &DenoiseRun<f32>) -> Outcome {
    let cal = calibrated_rehash::<f32>(&DenoiseRunConfig::default(), KeySelector::TargetCount(13)).unwrap();
    let r = &cal.rehash.report;
    let keys = r.schedule.as_ref().unwrap().key_steps.len();
    let fraction = r.node_evals as f64 / r.full_node_evals as f64;
    let err = r.max_rel_error.unwrap();
    let all_key = rehash_execute::<f32>(&DenoiseRunConfig::default(), &StepSchedule::all_key(25)).unwrap();
    let identical = all_key.output == full.output && cal.full.output == full.output;
    check(
        keys == 13 && fraction <= 0.6 && identical,
        format!(
            "{keys} key steps at γ={:.6}, executed fraction {fraction:.3}, max rel error vs full run {err:.3e} (reported), all-key bit-identical {identical}",
            r.schedule.as_ref().unwrap().gamma.unwrap()
        ),
    )
}

fn naive_divergence(seed0: &DenoiseRun<f32>) -> Outcome {
    let mut diverged = 0;
    let mut errs = Vec::new();
    for seed in 0..10u64 {
        let mut cfg = DenoiseRunConfig::default();
        cfg.unet.seed = seed;
        let reference = if seed == 0 { seed0.clone() } else { run_denoise::<f32>(&cfg, &[]).unwrap() };
        let naive = run_denoise::<f32>(&DenoiseRunConfig { mode: RunMode::Naiveclip, naive_chunk: 2, ..cfg }, &[]).unwrap();
        let c = compare_runs((&reference.report, &reference.output), (&naive.report, &naive.output)).unwrap();
        errs.push(c.max_abs_error);
        if c.max_abs_error > 1e-3 {
            diverged += 1;
        }
    }
    let min = errs.iter().copied().fold(f64::INFINITY, f64::min);
    check(diverged >= 9, format!("{diverged}/10 seeds exceed 1e-3 max abs error (smallest {min:.3e})"))
}

fn slicer_arithmetic() -> Outcome {
    let spatial = |bt, k| match plan_spatial(bt, k).unwrap() {
        SlicePlan::SpatialBt { extents, .. } => extents,
        p => panic!("unexpected plan {p:?}"),
    };
    let tiles = |h, w, kh, kw| match plan_temporal(h, w, kh, kw).unwrap() {
        SlicePlan::TemporalHw { extents, .. } => extents,
        p => panic!("unexpected plan {p:?}"),
    };
    let cases = [
        spatial(14, 7) == vec![2; 7],
        spatial(14, 4) == vec![4, 4, 4, 2],
        spatial(5, 1) == vec![5],
        tiles(8, 8, 4, 4) == TileExtents { rows: vec![2; 4], cols: vec![2; 4] },
        plan_temporal(8, 8, 4, 4).unwrap().slice_count() == 16,
        tiles(7, 7, 4, 4) == TileExtents { rows: vec![2, 2, 2, 1], cols: vec![2, 2, 2, 1] },
        tiles(6, 6, 1, 1) == TileExtents { rows: vec![6], cols: vec![6] },
    ];
    let passed = cases.iter().filter(|&&c| c).count();
    check(passed == cases.len(), format!("{passed}/{} ceiling examples reproduced", cases.len()))
}

#[test]
fn acceptance() {
    let mut lines: Vec<(usize, &str, Outcome)> = Vec::new();

    let (c32, runs32) = lossless::<f32>(1e-5);
    let (c64, _) = lossless::<f64>(1e-12);
    let both = match (&c32, &c64) {
        (Ok(a), Ok(b)) => Ok(format!("{a}; {b}")),
        (a, b) => Err(format!("{}; {}", a.as_ref().unwrap_or_else(|e| e), b.as_ref().unwrap_or_else(|e| e))),
    };
    lines.push((1, "lossless slicing and grouping", both));

    let reference = &runs32[0];
    let mut sliced = Vec::new();
    for k in [1, 2, 4] {
        sliced.push((k, run_denoise::<f32>(&DenoiseRunConfig { spatial_k: k, ..mode(RunMode::Slicedloop) }, &[]).unwrap()));
    }
    sliced.push((8, runs32[1].clone()));
    let peaks: Vec<usize> = sliced.iter().map(|(_, r)| r.report.peak_bytes).collect();
    let ratio = peaks[3] as f64 / reference.report.peak_bytes as f64;
    let non_increasing = peaks.windows(2).all(|w| w[1] <= w[0]);
    lines.push((
        2,
        "peak memory reduction",
        check(
            ratio <= 0.6 && non_increasing,
            format!("k=8 peak ratio {ratio:.3} (limit 0.6); peaks over k=1,2,4,8 {peaks:?}"),
        ),
    ));

    let (loop_peak, pipe_peak) = (runs32[1].report.peak_bytes, runs32[2].report.peak_bytes);
    lines.push((
        3,
        "pipelining adds no memory",
        check(loop_peak == pipe_peak, format!("sliced loop {loop_peak} B, pipelined {pipe_peak} B")),
    ));

    lines.push((4, "key step search fidelity", a1_fidelity()));
    lines.push((5, "rehash operating point", rehash_operating_point(reference)));
    lines.push((6, "naive clip divergence", naive_divergence(reference)));

    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for (k, run) in &sliced {
        let est = run.report.static_peak_bytes.unwrap() as f64;
        let measured = run.report.peak_bytes as f64;
        let rel = (est - measured).abs() / measured;
        worst = worst.max(rel);
        detail.push(format!("k={k}: {:.2}%", rel * 100.0));
    }
    lines.push((
        7,
        "static model vs ledger",
        check(worst <= 0.05, format!("relative gap {} (limit 5%)", detail.join(", "))),
    ));
    lines.push((8, "slicer arithmetic", slicer_arithmetic()));

    let mut failed = 0;
    for (n, name, outcome) in &lines {
        match outcome {
            Ok(d) => println!("criterion {n} PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {d}");
            }
        }
    }
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
