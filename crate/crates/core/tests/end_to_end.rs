use slicewise::executor::{check_pipeline_contract, Engine, ExecConfig, ExecMode};
use slicewise::graph::Graph;
use slicewise::grouping::{group_operators, GroupingConfig};
use slicewise::harness::{run_denoise, DenoiseRunConfig, RunMode};
use slicewise::kernels::StepCtx;
use slicewise::memory::timeline_peak;
use slicewise::rehash::{rehash_execute, StepSchedule};
use slicewise::tensor::{Dtype, Tensor};
use slicewise::unet::{build_toy_unet, UNetConfig, FINAL_UP_PROBE};
use slicewise::weights::WeightBundle;

fn small(steps: usize) -> DenoiseRunConfig {
    DenoiseRunConfig {
        unet: UNetConfig { frames: 4, height: 16, width: 16, steps, ..UNetConfig::default() },
        ..DenoiseRunConfig::default()
    }
}

#[test]
fn grouped_timeline_peak_is_far_below_reference() {
    let cfg = UNetConfig { steps: 1, ..UNetConfig::default() };
    let (graph, weights) = build_toy_unet(&cfg).unwrap();
    let engine = Engine::<f32>::new(graph, &weights).unwrap();
    let x = Tensor::randn(cfg.input_shape(), 5);
    let reference = engine.execute(&ExecConfig::new(ExecMode::Reference), &x, StepCtx::default(), &[]).unwrap();
    let grouped = engine.execute(&ExecConfig::new(ExecMode::SlicedLoop), &x, StepCtx::default(), &[]).unwrap();
    let a = timeline_peak(&reference.ledger.export_timeline()).unwrap() as f64;
    let b = timeline_peak(&grouped.ledger.export_timeline()).unwrap() as f64;
    assert!(b <= 0.6 * a, "reference {a}, grouped {b}");
    assert_eq!(reference.output, grouped.output);
}

#[test]
fn pipelined_stage_events_obey_the_contract() {
    let cfg = small(1).unet;
    let (graph, weights) = build_toy_unet(&cfg).unwrap();
    let engine = Engine::<f32>::new(graph, &weights).unwrap();
    let x = Tensor::randn(cfg.input_shape(), 5);
    let exec = ExecConfig { mode: ExecMode::Pipelined, grouping: GroupingConfig { spatial_k: 4, ..Default::default() } };
    let run = engine.execute(&exec, &x, StepCtx::default(), &[]).unwrap();
    assert!(!run.stage_events.is_empty());
    check_pipeline_contract(&run.stage_events).unwrap();
    assert_eq!(run.ledger.current_bytes(), 0);
}

#[test]
fn all_key_schedule_is_bit_identical_to_the_plain_loop() {
    let cfg = small(4);
    let plain = run_denoise::<f32>(&cfg, &[]).unwrap();
    let rehashed = rehash_execute::<f32>(&cfg, &StepSchedule::all_key(4)).unwrap();
    assert_eq!(rehashed.output, plain.output);
    assert_eq!(rehashed.report.node_evals, plain.report.node_evals);
}

#[test]
fn skipped_steps_run_exactly_the_tail() {
    let cfg = small(6);
    let (graph, _) = build_toy_unet(&cfg.unet).unwrap();
    let probe = graph.find_label(FINAL_UP_PROBE).unwrap();
    // everything after the probe in topological order depends on it
    let tail_size = graph.topo_order().len() - graph.position(probe) - 1;
    let (tail, _) = graph.tail_from(probe).unwrap();
    assert_eq!(tail.compute_node_count(), tail_size);
    let full = graph.compute_node_count();

    let sched = StepSchedule::new(6, vec![0, 3, 5], None).unwrap();
    for mode in [RunMode::Reference, RunMode::Slicedloop, RunMode::Pipelined] {
        let run = rehash_execute::<f32>(&DenoiseRunConfig { mode, ..cfg.clone() }, &sched).unwrap();
        let counts = &run.report.op_counts;
        for c in counts {
            let expect = if sched.key_steps.contains(&c.step) { full } else { tail_size };
            assert_eq!(c.executed, expect, "step {} in {mode:?}", c.step);
            assert_eq!(c.executed + c.skipped, full);
        }
        assert_eq!(counts[1].donor, Some(0));
        assert_eq!(counts[2].donor, Some(0));
        assert_eq!(counts[4].donor, Some(3));
        assert_eq!(run.report.node_evals, 3 * full + 3 * tail_size);
    }
}

#[test]
fn skipping_changes_the_output_but_stays_close() {
    let cfg = small(6);
    let plain = run_denoise::<f32>(&cfg, &[]).unwrap();
    let sched = StepSchedule::new(6, vec![0, 2, 4, 5], None).unwrap();
    let run = rehash_execute::<f32>(&cfg, &sched).unwrap();
    let err = slicewise::tensor::max_rel_error(&run.output, &plain.output).unwrap();
    assert!(err > 0.0 && err < 0.5, "{err}");
}

#[test]
fn modes_agree_in_f64() {
    let cfg = DenoiseRunConfig { dtype: Dtype::F64, spatial_k: 3, ..small(2) };
    let reference = run_denoise::<f64>(&cfg, &[]).unwrap();
    for mode in [RunMode::Slicedloop, RunMode::Pipelined] {
        let run = run_denoise::<f64>(&DenoiseRunConfig { mode, ..cfg.clone() }, &[]).unwrap();
        assert_eq!(run.report.output_checksum, reference.report.output_checksum);
        assert_eq!(run.report.peak_bytes % 8, 0);
    }
}

#[test]
fn cfg_doubling_is_sliced_losslessly() {
    let mut cfg = small(2);
    cfg.unet.cfg_doubling = true;
    let reference = run_denoise::<f32>(&cfg, &[]).unwrap();
    let sliced = run_denoise::<f32>(&DenoiseRunConfig { mode: RunMode::Slicedloop, ..cfg.clone() }, &[]).unwrap();
    assert_eq!(sliced.output, reference.output);
    assert!(sliced.report.peak_bytes < reference.report.peak_bytes);
}

#[test]
fn naive_clip_changes_the_output() {
    let cfg = small(2);
    let reference = run_denoise::<f32>(&cfg, &[]).unwrap();
    let naive = run_denoise::<f32>(&DenoiseRunConfig { mode: RunMode::Naiveclip, ..cfg.clone() }, &[]).unwrap();
    assert_ne!(naive.output, reference.output);
    assert_eq!(naive.report.static_peak_bytes, None);
}

#[test]
fn graph_and_weights_survive_serialisation() {
    let (graph, weights) = build_toy_unet(&UNetConfig::default()).unwrap();
    let back = Graph::from_json(&graph.to_json()).unwrap();
    assert_eq!(back.nodes(), graph.nodes());
    let bytes = weights.to_bytes();
    let read = WeightBundle::read_from(&bytes[..]).unwrap();
    assert_eq!(read, weights);
    let grouped = group_operators(&graph, &GroupingConfig::default()).unwrap();
    let report = grouped.report(&graph, 4);
    assert_eq!(report["groups"].as_array().unwrap().len(), grouped.groups.len());
}

#[test]
fn every_run_is_a_function_of_its_config() {
    let a = run_denoise::<f32>(&DenoiseRunConfig { mode: RunMode::Pipelined, ..small(2) }, &[]).unwrap();
    let b = run_denoise::<f32>(&DenoiseRunConfig { mode: RunMode::Pipelined, ..small(2) }, &[]).unwrap();
    assert_eq!(a.report.output_checksum, b.report.output_checksum);
    assert_eq!(a.report.peak_bytes, b.report.peak_bytes);
    let mut other = small(2);
    other.unet.seed = 1;
    let c = run_denoise::<f32>(&other, &[]).unwrap();
    assert_ne!(c.report.output_checksum, a.report.output_checksum);
}
