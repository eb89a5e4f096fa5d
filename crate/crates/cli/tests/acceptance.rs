//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured numbers. The desk-scale end-to-end pipeline (criteria 9/10)
//! runs once and is shared.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use prunefire_cli::commands;
use prunefire_cli::config::RunConfig;
use prunefire_core::data::{synthesize_dataset, Dataset, Split, SynthSpec};
use prunefire_core::eval::{compute_eer, spearman, template_table, Descriptor, Template};
use prunefire_core::gradcheck::run_layer_suite;
use prunefire_core::model::{
    build_arch, build_full_config, ArchSpec, BlockSpec, FireSpec, NodeKind,
};
use prunefire_core::pruning::{
    brute_force_sweep, group_contribution, group_model, prune_session, scoring_epoch,
    select_victims, surgery, ImportanceTable, PruneHooks, PruneSchedule,
};
use prunefire_core::rng::Rng;
use prunefire_core::tape::Tape;
use prunefire_core::tensor::Tensor;
use prunefire_core::train::{assemble_eval_batch, train, TrainConfig};

fn pass(criterion: usize, name: &str, details: String) {
    println!(
        "[acceptance] criterion {:>2} ({}): PASS — {}",
        criterion, name, details
    );
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_01_parameter_count() {
    let started = Instant::now();
    let mut rng = Rng::new(0xACC01);
    let model = build_full_config(100, &mut rng);
    let stats = model.count_stats();
    let head = match &model.nodes[model.node_index("fc").expect("head")].kind {
        NodeKind::Dense(d) => d.weight.elements() + d.bias.elements(),
        _ => unreachable!(),
    };
    let body = stats.learnables - head;
    let target = 1.24e6;
    let deviation = (body as f64 - target).abs() / target;
    assert!(
        deviation <= 0.03,
        "learnables {} deviate {:.2}% from 1.24M",
        body,
        deviation * 100.0
    );
    assert_eq!(stats.embedding_dim, 1000, "embedding dim");
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {:?}", elapsed);
    pass(
        1,
        "parameter count",
        format!(
            "learnables {} ({:+.2}% of 1.24M), embedding 1000, {:?}",
            body,
            (body as f64 / target - 1.0) * 100.0,
            elapsed
        ),
    );
}

// ---------------------------------------------------------------- criterion 2

fn synthetic_descriptor_table(
    n_ids: usize,
    per_pose: usize,
    dim: usize,
) -> Vec<[Vec<Descriptor>; 3]> {
    let mut rng = Rng::new(0xACC02);
    (0..n_ids)
        .map(|_| {
            let mut per_pose_descs: [Vec<Descriptor>; 3] = [Vec::new(), Vec::new(), Vec::new()];
            for pose in prunefire_core::data::POSES {
                for image in 0..per_pose {
                    let mut v: Vec<f32> = (0..dim).map(|_| rng.normal()).collect();
                    let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-9);
                    v.iter_mut().for_each(|x| *x /= norm);
                    per_pose_descs[pose.index()].push(Descriptor {
                        vec: v,
                        image,
                        pose,
                        flip_averaged: false,
                    });
                }
            }
            per_pose_descs
        })
        .collect()
}

#[test]
fn criterion_02_protocol_counts() {
    use prunefire_core::data::Pose::*;
    let started = Instant::now();
    let descs = synthetic_descriptor_table(368, 10, 8);
    let window = 100;

    let table1 = template_table(&descs, 1).unwrap();
    let table5 = template_table(&descs, 5).unwrap();
    let counts = |t: &Vec<[Vec<Template>; 3]>, a, b| {
        let set = prunefire_core::eval::protocol_scores(t, a, b, window).unwrap();
        (set.genuine.len(), set.impostor.len())
    };

    assert_eq!(counts(&table1, Frontal, Frontal), (16560, 36800));
    assert_eq!(counts(&table1, ThreeQuarter, ThreeQuarter), (16560, 36800));
    assert_eq!(counts(&table1, Profile, Profile), (16560, 36800));
    for (a, b) in [
        (Frontal, ThreeQuarter),
        (Frontal, Profile),
        (ThreeQuarter, Profile),
    ] {
        assert_eq!(counts(&table1, a, b), (36800, 36800));
    }
    assert_eq!(counts(&table5, Frontal, Frontal), (368, 36800));
    for (a, b) in [
        (Frontal, ThreeQuarter),
        (Frontal, Profile),
        (ThreeQuarter, Profile),
    ] {
        assert_eq!(counts(&table5, a, b), (1472, 36800));
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {:?}", elapsed);
    pass(
        2,
        "protocol counts",
        format!(
            "368 ids: 1-1 same 16560/36800, 1-1 cross 36800/36800, 5-5 same 368/36800, 5-5 cross 1472/36800, {:?}",
            elapsed
        ),
    );
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_03_gradient_suite() {
    let started = Instant::now();
    let report = run_layer_suite(20, 0xACC03).expect("gradient suite");
    assert_eq!(report.layers.len(), 10, "every layer type covered");
    for (name, worst) in &report.layers {
        assert!(
            *worst <= 1e-4,
            "{}: worst rel err {:.3e} > 1e-4",
            name,
            worst
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {:?}", elapsed);
    pass(
        3,
        "gradient suite",
        format!(
            "10 layer types x 20 instances, worst rel err {:.3e}, {:?}",
            report.worst(),
            elapsed
        ),
    );
}

// ---------------------------------------------------------------- criterion 4

fn random_fire_arch(rng: &mut Rng) -> ArchSpec {
    let mut blocks = vec![(
        "conv1".to_string(),
        BlockSpec::Conv {
            filters: 3 + rng.below(4),
            kernel: 3,
            stride: 2,
            pad: 1,
        },
    )];
    for i in 0..1 + rng.below(3) {
        blocks.push((
            format!("fire{}", i + 2),
            BlockSpec::Fire(FireSpec {
                squeeze_1x1: 2 + rng.below(3),
                expand_1x1: 2 + rng.below(5),
                expand_3x3: 2 + rng.below(5),
            }),
        ));
        if rng.coin() {
            blocks.push((
                format!("pool{}", i + 2),
                BlockSpec::MaxPool {
                    kernel: 2,
                    stride: 2,
                },
            ));
        }
    }
    ArchSpec {
        input_channels: 3,
        blocks,
        embed_filters: 4 + rng.below(8),
        num_classes: 2 + rng.below(4),
    }
}

#[test]
fn criterion_04_surgery_equivalence() {
    let started = Instant::now();
    let mut rng = Rng::new(0xACC04);
    let mut events = 0usize;
    let mut worst = 0.0f32;
    'outer: for round in 0..20 {
        let arch = random_fire_arch(&mut rng);
        let mut model = build_arch(&arch, &mut Rng::with_stream(0xACC04, round));
        let x = Tensor::from_vec(
            &[2, 3, 19, 19],
            (0..2 * 3 * 19 * 19).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        for _ in 0..4 {
            let groups = group_model(&model).unwrap();
            let averages: Vec<f64> = (0..groups.len()).map(|_| rng.uniform_f64()).collect();
            let (victims, _) = select_victims(&averages, &groups, 1 + rng.below(2), 1);
            if victims.is_empty() {
                break;
            }
            let ablations: Vec<(usize, usize)> =
                victims.iter().map(|v| (v.conv, v.filter)).collect();
            let ablated = model.forward_eval(&x, &ablations).unwrap();
            let pruned = surgery(&model, &victims).unwrap();
            pruned.validate_channels().unwrap();
            let removed = pruned.forward_eval(&x, &[]).unwrap();
            let max_abs = ablated
                .logits
                .data()
                .iter()
                .zip(removed.logits.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_abs <= 1e-5, "event {}: {} > 1e-5", events, max_abs);
            worst = worst.max(max_abs);
            model = pruned;
            events += 1;
            if events >= 60 {
                break 'outer;
            }
        }
    }
    assert!(events >= 50, "only {} prune events exercised", events);
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "took {:?}", elapsed);
    pass(
        4,
        "surgery equivalence",
        format!(
            "{} randomized events, worst |Δ| {:.2e}, validator green, {:?}",
            events, worst, elapsed
        ),
    );
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_05_taylor_score_exactness() {
    let started = Instant::now();
    let mut rng = Rng::new(0xACC05);
    let arch = random_fire_arch(&mut rng);
    let mut model = build_arch(&arch, &mut rng);
    let groups = group_model(&model).unwrap();

    let n = 3usize;
    let x = Tensor::from_vec(
        &[n, 3, 16, 16],
        (0..n * 3 * 256).map(|_| rng.normal()).collect(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut tape = Tape::new();
    let (loss, bindings) = model.forward_train(&mut tape, x, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut table = ImportanceTable::new(groups.len());
    prunefire_core::pruning::score_batch(&mut table, &groups, &model, &bindings, &grads).unwrap();

    // independent recomputation from dumped (gradient, weight) arrays in the
    // documented member order: weight row, bias, then gamma/beta per bn
    use prunefire_core::model::{ParamRef, ParamSlot};
    let grad_of = |node: usize, slot: ParamSlot| -> &Tensor<f32> {
        let val = bindings
            .iter()
            .find(|(r, _)| *r == ParamRef { node, slot })
            .map(|(_, v)| *v)
            .expect("binding");
        grads.get(val).expect("grad")
    };
    let mut checked = 0usize;
    for layer in &groups.layers {
        let conv = match &model.nodes[layer.conv].kind {
            NodeKind::Conv(c) => c.clone(),
            _ => unreachable!(),
        };
        let per_filter = conv.weight.elements() / conv.filters();
        let (gw, gb) = (
            grad_of(layer.conv, ParamSlot::ConvWeight),
            grad_of(layer.conv, ParamSlot::ConvBias),
        );
        let first_id = groups
            .groups
            .iter()
            .find(|g| g.conv == layer.conv)
            .unwrap()
            .id;
        for f in 0..layer.filters {
            let mut pairs: Vec<(f32, f32)> = (f * per_filter..(f + 1) * per_filter)
                .map(|i| (gw.data()[i], conv.weight.data()[i]))
                .collect();
            pairs.push((gb.data()[f], conv.bias.data()[f]));
            for (bn_node, offset) in &layer.bns {
                let bn = match &model.nodes[*bn_node].kind {
                    NodeKind::BatchNorm(b) => b.clone(),
                    _ => unreachable!(),
                };
                let (gg, gbeta) = (
                    grad_of(*bn_node, ParamSlot::BnGamma),
                    grad_of(*bn_node, ParamSlot::BnBeta),
                );
                pairs.push((gg.data()[offset + f], bn.gamma.data()[offset + f]));
                pairs.push((gbeta.data()[offset + f], bn.beta.data()[offset + f]));
            }
            let expect = group_contribution(pairs.into_iter());
            let got = table.sums[first_id + f];
            assert_eq!(
                got.to_bits(),
                expect.to_bits(),
                "group {}: {} vs {} (must match to 0 ULP)",
                first_id + f,
                got,
                expect
            );
            checked += 1;
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {:?}", elapsed);
    pass(
        5,
        "Taylor score exactness",
        format!("{} groups recomputed to 0 ULP, {:?}", checked, elapsed),
    );
}

// ---------------------------------------------------------------- criterion 6

/// Exhaustive threshold-sweep oracle for the EER.
fn eer_oracle(genuine: &[f64], impostor: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    thresholds.push(thresholds.last().unwrap() + 1.0);
    let mut prev: Option<(f64, f64)> = None;
    for t in thresholds {
        let far = impostor.iter().filter(|s| **s >= t).count() as f64 / impostor.len() as f64;
        let frr = genuine.iter().filter(|s| **s < t).count() as f64 / genuine.len() as f64;
        let d = far - frr;
        if d == 0.0 {
            return far;
        }
        if d < 0.0 {
            return match prev {
                Some((pfar, pfrr)) => {
                    let d1 = pfar - pfrr;
                    pfar + d1 / (d1 - d) * (far - pfar)
                }
                None => far.max(frr),
            };
        }
        prev = Some((far, frr));
    }
    0.5
}

#[test]
fn criterion_06_eer_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = Rng::new(0xACC06);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n_gen = 5 + rng.below(200);
        let n_imp = 5 + rng.below(200);
        let spread = 0.2 + rng.uniform_f64();
        let genuine: Vec<f64> = (0..n_gen)
            .map(|_| rng.uniform_f64() * spread + 0.3)
            .collect();
        let impostor: Vec<f64> = (0..n_imp).map(|_| rng.uniform_f64() * spread).collect();
        let got = compute_eer(&genuine, &impostor).unwrap().eer;
        let want = eer_oracle(&genuine, &impostor);
        let err = (got - want).abs();
        assert!(
            err <= 1e-9,
            "case {}: impl {} vs oracle {}",
            case,
            got,
            want
        );
        worst = worst.max(err);
    }
    // trivial cases are exact
    assert_eq!(compute_eer(&[0.9; 40], &[0.1; 50]).unwrap().eer, 0.0);
    let same: Vec<f64> = (0..75).map(|i| i as f64 * 0.01).collect();
    assert_eq!(compute_eer(&same, &same).unwrap().eer, 0.5);
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {:?}", elapsed);
    pass(
        6,
        "EER oracle equivalence",
        format!(
            "100 random score sets, worst |Δ| {:.2e}; trivial cases exact, {:?}",
            worst, elapsed
        ),
    );
}

// ------------------------------------------------------- shared desk fixtures

fn synth_to_dataset(spec: &SynthSpec) -> (prunefire_core::data::SynthDataset, Dataset) {
    let synth = synthesize_dataset(spec).unwrap();
    let items: Vec<_> = synth
        .manifest
        .split_rows(Split::Train)
        .map(|(i, row)| (synth.entries[i].1.clone(), row.identity.clone()))
        .collect();
    let dataset = Dataset::from_labeled(items).unwrap();
    (synth, dataset)
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_07_linear_filter_decay() {
    let started = Instant::now();
    let spec = SynthSpec {
        n_identities: 8,
        n_per_pose: 6,
        seed: 0xACC07,
        train_fraction: 0.5,
        ..SynthSpec::default()
    };
    let (_, dataset) = synth_to_dataset(&spec);
    let mut split_rng = Rng::new(0xACC07);
    let (train_idx, val_idx) = dataset.split_train_val(0.1, &mut split_rng).unwrap();

    let mut rng = Rng::new(0xACC07 + 1);
    let mut model =
        prunefire_core::model::build_micro_config(dataset.n_classes(), 8, &mut rng).unwrap();
    // brief pre-training so the session runs on a trained model
    let warmup = TrainConfig {
        batch_size: 16,
        max_epochs: 2,
        min_images_per_class: 2,
        ..TrainConfig::default()
    };
    train(
        &mut model,
        &dataset,
        &train_idx,
        &val_idx,
        &warmup,
        &mut rng,
        &mut || 0.0,
    )
    .unwrap();

    let original = model.count_stats().total_filters;
    let schedule = PruneSchedule {
        step_fraction: 0.01,
        subset_fraction: 0.25,
        max_total_fraction: 0.20,
        batch_size: 16,
        retrain: None,
        ..PruneSchedule::default()
    };
    let k = schedule.victims_per_iteration(original);
    let mut hooks = PruneHooks::default();
    let log = prune_session(
        &mut model, &dataset, &train_idx, &val_idx, &schedule, original, 0, &mut rng, &mut hooks,
    )
    .unwrap();

    assert_eq!(log.iterations.len(), 20, "20 iterations at step 1%");
    assert!(!log.exhausted);
    // exactly k filters per iteration, 20k total = 20 x 1% of the original
    let mut prev = original;
    for row in &log.iterations {
        assert_eq!(prev - row.filters, k, "iteration {} removed", row.iteration);
        prev = row.filters;
    }
    assert_eq!(original - model.count_stats().total_filters, 20 * k);
    assert_eq!(k, schedule.victims_per_iteration(original));
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 600.0, "took {:?}", elapsed);
    pass(
        7,
        "linear filter decay",
        format!(
            "{} -> {} filters over 20 iterations ({} per iteration = round-half-up of 1%), {:?}",
            original,
            original - 20 * k,
            k,
            elapsed
        ),
    );
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_08_taylor_vs_oracle_ranking() {
    let started = Instant::now();
    // compact fire topology under the 300-group brute-force ceiling
    let arch = ArchSpec {
        input_channels: 3,
        blocks: vec![
            (
                "conv1".into(),
                BlockSpec::Conv {
                    filters: 12,
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                },
            ),
            (
                "pool1".into(),
                BlockSpec::MaxPool {
                    kernel: 3,
                    stride: 2,
                },
            ),
            (
                "fire2".into(),
                BlockSpec::Fire(FireSpec {
                    squeeze_1x1: 8,
                    expand_1x1: 16,
                    expand_3x3: 16,
                }),
            ),
            (
                "pool2".into(),
                BlockSpec::MaxPool {
                    kernel: 3,
                    stride: 2,
                },
            ),
            (
                "fire3".into(),
                BlockSpec::Fire(FireSpec {
                    squeeze_1x1: 12,
                    expand_1x1: 24,
                    expand_3x3: 24,
                }),
            ),
        ],
        embed_filters: 32,
        num_classes: 9,
    };
    let spec = SynthSpec {
        n_identities: 10,
        n_per_pose: 10,
        seed: 0xACC08,
        train_fraction: 0.9,
        ..SynthSpec::default()
    };
    let (_, dataset) = synth_to_dataset(&spec);
    assert_eq!(dataset.n_classes(), 9);
    let mut split_rng = Rng::new(0xACC08);
    let (train_idx, val_idx) = dataset.split_train_val(0.05, &mut split_rng).unwrap();

    let mut rng = Rng::new(0xACC08 + 1);
    let mut model = build_arch(&arch, &mut rng);
    // mid-training regime: the first-order scores need live gradients, so
    // stop well before convergence flattens them
    let cfg = TrainConfig {
        batch_size: 16,
        max_epochs: 14,
        min_images_per_class: 2,
        plateau_patience: 5,
        ..TrainConfig::default()
    };
    let report = train(
        &mut model,
        &dataset,
        &train_idx,
        &val_idx,
        &cfg,
        &mut rng,
        &mut || 0.0,
    )
    .unwrap();
    let final_acc = report.history.last().unwrap().val_acc;

    let groups = group_model(&model).unwrap();
    assert!(
        groups.len() <= 300,
        "{} groups exceed the oracle ceiling",
        groups.len()
    );

    // epoch-averaged Taylor scores under the scoring protocol
    let schedule = PruneSchedule {
        scoring_lr: 0.01,
        batch_size: 16,
        ..PruneSchedule::default()
    };
    let (table, _) = scoring_epoch(
        &mut model, &dataset, &train_idx, &groups, &schedule, &mut rng,
    )
    .unwrap();
    let taylor = table.averages();

    // induced-error oracle over the full training split
    let mut batches = Vec::new();
    for chunk in train_idx.chunks(32) {
        let (batch, labels) = assemble_eval_batch(&dataset, chunk, schedule.norm).unwrap();
        batches.push((batch, labels));
    }
    let oracle = brute_force_sweep(&model, &groups, &batches).unwrap();

    let rho = spearman(&taylor, &oracle);
    let bottom = |scores: &[f64]| -> std::collections::BTreeSet<usize> {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
        order.into_iter().take(scores.len() / 10).collect()
    };
    let bt = bottom(&taylor);
    let bo = bottom(&oracle);
    let overlap = bt.intersection(&bo).count() as f64 / bt.len().max(1) as f64;

    assert!(rho > 0.3, "Spearman correlation {:.3} <= 0.3", rho);
    assert!(overlap >= 0.3, "bottom-10% overlap {:.2} < 0.3", overlap);
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1200.0, "took {:?}", elapsed);
    pass(
        8,
        "Taylor vs oracle ranking",
        format!(
            "{} groups (val acc {:.2}): Spearman {:.3}, bottom-10% overlap {:.0}%, {:?}",
            groups.len(),
            final_acc,
            rho,
            overlap * 100.0,
            elapsed
        ),
    );
}

// ------------------------------------------------- criteria 9 and 10 fixture

struct DeskRun {
    dir_a: PathBuf,
    dir_b: PathBuf,
    final_val_acc: f64,
    baseline_1v1: f64,
    baseline_5v5: f64,
    eer_1v1_at_15: f64,
    eer_5v5_at_40: f64,
    wall_seconds_single: f64,
}

static DESK_RUN: OnceLock<DeskRun> = OnceLock::new();

fn desk_config_text(data_dir: &Path, out_dir: &Path) -> String {
    format!(
        r#"seed = 9001
[model]
config = micro
width_divisor = 8
[data]
dir = {data}
synth_identities = 40
synth_per_pose = 10
synth_noise = 14.0
[train]
batch_size = 32
max_epochs = 45
plateau_patience = 4
plateau_min_delta = 0.002
val_fraction = 0.1
min_images_per_class = 2
[prune]
step_fraction = 0.01
subset_fraction = 0.25
retrain_every = 5
max_total_fraction = 0.4
scoring_lr = 0.01
batch_size = 32
retrain_max_epochs = 3
retrain_initial_lr = 0.01
eval_every = 5
[eval]
impostor_window = 10
per_template = 1,5
[output]
dir = {out}
"#,
        data = data_dir.display(),
        out = out_dir.display()
    )
}

fn run_pipeline(root: &Path, label: &str) -> PathBuf {
    let out_dir = root.join(label);
    let data_dir = root.join("data");
    let cfg = RunConfig::parse(&desk_config_text(&data_dir, &out_dir)).expect("desk config");
    if !data_dir.join("manifest.csv").exists() {
        commands::synth::run(&cfg).expect("synth");
    }
    commands::train::run(&cfg).expect("train");
    commands::prune::run(&cfg).expect("prune");
    commands::eval::run(&cfg).expect("eval");
    commands::report::run(&cfg).expect("report");
    out_dir
}

fn load_csv_column(path: &Path, column: &str) -> Vec<(usize, f64)> {
    let text = fs::read_to_string(path).expect("csv");
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().expect("header").split(',').collect();
    let idx = header
        .iter()
        .position(|c| *c == column)
        .unwrap_or_else(|| panic!("column {} missing from {}", column, path.display()));
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .filter_map(|(row, l)| {
            let cells: Vec<&str> = l.split(',').collect();
            cells[idx].parse::<f64>().ok().map(|v| (row, v))
        })
        .collect()
}

fn desk_run() -> &'static DeskRun {
    DESK_RUN.get_or_init(|| {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("desk-scale");
        fs::remove_dir_all(&root).ok();
        fs::create_dir_all(&root).unwrap();

        let started = Instant::now();
        let dir_a = run_pipeline(&root, "run_a");
        let wall_seconds_single = started.elapsed().as_secs_f64();
        let dir_b = run_pipeline(&root, "run_b");

        // baseline EERs of the unpruned checkpoint
        let data = prunefire_cli::runio::load_dataset_dir(&root.join("data")).unwrap();
        let (_, tensors) =
            prunefire_cli::runio::test_image_tensors(&data, Default::default()).unwrap();
        let model = prunefire_cli::runio::load_checkpoint(&dir_a.join("model.bin")).unwrap();
        let summaries = commands::verification_summaries(&model, &tensors, 10, &[1, 5]).unwrap();
        let baseline_1v1 = summaries[0].pooled.eer;
        let baseline_5v5 = summaries[1].pooled.eer;

        let history = load_csv_column(&dir_a.join("history.csv"), "val_acc");
        let final_val_acc = history.last().expect("history rows").1;

        let log_path = dir_a.join("prune/iterations.csv");
        let iters = load_csv_column(&log_path, "iteration");
        let e1 = load_csv_column(&log_path, "eer_1v1_pooled");
        let e5 = load_csv_column(&log_path, "eer_5v5_pooled");
        let at = |rows: &[(usize, f64)], iteration: f64| -> f64 {
            let row = iters
                .iter()
                .find(|(_, it)| *it == iteration)
                .map(|(r, _)| *r)
                .expect("iteration row");
            rows.iter()
                .find(|(r, _)| *r == row)
                .map(|(_, v)| *v)
                .expect("eer value at iteration")
        };
        DeskRun {
            dir_a,
            dir_b,
            final_val_acc,
            baseline_1v1,
            baseline_5v5,
            eer_1v1_at_15: at(&e1, 15.0),
            eer_5v5_at_40: at(&e5, 40.0),
            wall_seconds_single,
        }
    })
}

#[test]
fn criterion_09_desk_scale_end_to_end() {
    let run = desk_run();
    assert!(
        run.final_val_acc >= 0.90,
        "final validation accuracy {:.3} < 0.90",
        run.final_val_acc
    );
    assert!(
        run.eer_1v1_at_15 <= 1.5 * run.baseline_1v1,
        "1-1 EER at 15% pruning: {:.4} > 1.5 x baseline {:.4}",
        run.eer_1v1_at_15,
        run.baseline_1v1
    );
    assert!(
        run.eer_5v5_at_40 <= 2.0 * run.baseline_5v5,
        "5-5 EER at 40% pruning: {:.4} > 2.0 x baseline {:.4}",
        run.eer_5v5_at_40,
        run.baseline_5v5
    );
    assert!(
        run.wall_seconds_single <= 45.0 * 60.0,
        "single pipeline took {:.0} s > 45 min",
        run.wall_seconds_single
    );
    pass(
        9,
        "desk-scale end to end",
        format!(
            "val acc {:.3}; 1-1 EER {:.4} @15% vs baseline {:.4} (x{:.2}); 5-5 EER {:.4} @40% vs baseline {:.4} (x{:.2}); {:.0} s",
            run.final_val_acc,
            run.eer_1v1_at_15,
            run.baseline_1v1,
            run.eer_1v1_at_15 / run.baseline_1v1.max(1e-12),
            run.eer_5v5_at_40,
            run.baseline_5v5,
            run.eer_5v5_at_40 / run.baseline_5v5.max(1e-12),
            run.wall_seconds_single
        ),
    );
}

#[test]
fn criterion_10_determinism() {
    let run = desk_run();
    let log_a = fs::read(run.dir_a.join("prune/iterations.csv")).unwrap();
    let log_b = fs::read(run.dir_b.join("prune/iterations.csv")).unwrap();
    assert_eq!(log_a, log_b, "iteration logs differ between identical runs");

    let mut compared = 0usize;
    let mut names: Vec<String> = fs::read_dir(run.dir_a.join("prune"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".bin"))
        .collect();
    names.sort();
    for name in &names {
        let a = fs::read(run.dir_a.join("prune").join(name)).unwrap();
        let b = fs::read(run.dir_b.join("prune").join(name)).unwrap();
        assert_eq!(a, b, "checkpoint {} differs between identical runs", name);
        compared += 1;
    }
    assert!(compared >= 40, "only {} checkpoints compared", compared);

    let trained_a = fs::read(run.dir_a.join("model.bin")).unwrap();
    let trained_b = fs::read(run.dir_b.join("model.bin")).unwrap();
    assert_eq!(trained_a, trained_b, "trained checkpoints differ");
    pass(
        10,
        "determinism",
        format!(
            "iteration logs byte-identical; {} prune checkpoints + trained model byte-identical",
            compared
        ),
    );
}
