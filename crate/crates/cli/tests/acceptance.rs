//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs as a plain binary so the lines always reach stdout.

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use elastic_core::backbones::{
    build_concat_standin, build_full_audit_graph, Family, ResNetConfig, KNOWN_BACKBONES,
};
use elastic_core::budget::{backbone_cost_audit, ExitCost};
use elastic_core::checkpoint::{decode, encode};
use elastic_core::config::RunConfig;
use elastic_core::data::Dataset;
use elastic_core::elastic::Mode;
use elastic_core::experiment::{self, DataSplits};
use elastic_core::gradcheck::finite_difference_check;
use elastic_core::graph::AnchorKind;
use elastic_core::layers::{self, Padding};
use elastic_core::training::{self, PlateauScheduler};
use elastic_core::{
    elasticize, metrics, prune_exits, select_exit, Backbone, BackboneConfig, Budget, CostTable, ElasticNetwork,
    Error, FeatureShape, HeadConfig, LossConfig, Metric, MetricsLog, Slot, Tape, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-sample")
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_f32(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn padding(rng: &mut ChaCha8Rng) -> Padding {
    if rng.gen_bool(0.5) {
        Padding::Same
    } else {
        Padding::Valid
    }
}

const GRAD_CASES: usize = 20;
const GRAD_TOL: f64 = 1e-5;

type Build = Box<dyn Fn(&mut Tape<f64>, &[Slot]) -> elastic_core::Result<Slot>>;

/// One random instance of an operation: its inputs and how to record it.
fn grad_case(op: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Build) {
    let n = rng.gen_range(1..=2);
    let h = rng.gen_range(3..=6);
    let w = rng.gen_range(3..=6);
    let c = rng.gen_range(1..=3);
    match op {
        "conv2d" => {
            let k = [1, 3][rng.gen_range(0..2)];
            let cout = rng.gen_range(1..=3);
            let (stride, pad) = (rng.gen_range(1..=2), padding(rng));
            let inputs = vec![random(&[n, h, w, c], rng), random(&[k, k, c, cout], rng), random(&[cout], rng)];
            (inputs, Box::new(move |t, s| t.conv2d(s[0], s[1], Some(s[2]), stride, pad)))
        }
        "depthwise" => {
            let k = [1, 3][rng.gen_range(0..2)];
            let (stride, pad) = (rng.gen_range(1..=2), padding(rng));
            let inputs = vec![random(&[n, h, w, c], rng), random(&[k, k, c], rng), random(&[c], rng)];
            (inputs, Box::new(move |t, s| t.depthwise_conv2d(s[0], s[1], Some(s[2]), stride, pad)))
        }
        "dense" => {
            let f = rng.gen_range(1..=6);
            let classes = rng.gen_range(1..=5);
            let inputs = vec![random(&[n + 1, f], rng), random(&[f, classes], rng), random(&[classes], rng)];
            (inputs, Box::new(|t, s| t.dense(s[0], s[1], s[2])))
        }
        "relu" => (vec![random(&[n, h, w, c], rng)], Box::new(|t, s| t.relu(s[0]))),
        "max_pool" => {
            let (size, stride) = [(2, 2), (3, 2), (2, 1)][rng.gen_range(0..3)];
            let pad = padding(rng);
            (vec![random(&[n, h, w, c], rng)], Box::new(move |t, s| t.max_pool2d(s[0], size, stride, pad)))
        }
        "avg_pool" => {
            let (size, stride) = [(2, 2), (3, 2), (2, 1)][rng.gen_range(0..3)];
            let pad = padding(rng);
            (vec![random(&[n, h, w, c], rng)], Box::new(move |t, s| t.avg_pool2d(s[0], size, stride, pad)))
        }
        "global_avg_pool" => (vec![random(&[n, h, w, c], rng)], Box::new(|t, s| t.global_avg_pool(s[0]))),
        "batch_norm_train" => {
            let inputs = vec![random(&[n + 1, h, w, c], rng), random(&[c], rng), random(&[c], rng)];
            (inputs, Box::new(|t, s| t.batch_norm_train(s[0], s[1], s[2], 1e-3)))
        }
        "batch_norm_infer" => {
            let mean = random(&[c], rng);
            let var = random(&[c], rng).map(|v| v.abs() + 0.5);
            let inputs = vec![random(&[n, h, w, c], rng), random(&[c], rng), random(&[c], rng)];
            (
                inputs,
                Box::new(move |t, s| t.batch_norm_infer(s[0], s[1], s[2], mean.clone(), var.clone(), 1e-3)),
            )
        }
        "softmax_exit_loss" => {
            let classes = [2, 3, 10][rng.gen_range(0..3)];
            let rows = rng.gen_range(1..=4);
            let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
            let scale = 1.0 / classes as f64;
            (
                vec![random(&[rows, classes], rng).scale(3.0)],
                Box::new(move |t, s| {
                    let p = t.softmax(s[0])?;
                    t.exit_loss(p, &labels, scale)
                }),
            )
        }
        "weighted_total" => {
            let exits = rng.gen_range(2..=4);
            let classes = rng.gen_range(2..=5);
            let rows = rng.gen_range(1..=3);
            let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
            let weights: Vec<f64> = (0..exits).map(|_| rng.gen_range(0.0..2.0)).collect();
            let inputs = (0..exits).map(|_| random(&[rows, classes], rng)).collect();
            let scale = 1.0 / classes as f64;
            (
                inputs,
                Box::new(move |t, s| {
                    let losses = s
                        .iter()
                        .map(|&z| {
                            let p = t.softmax(z)?;
                            t.exit_loss(p, &labels, scale)
                        })
                        .collect::<elastic_core::Result<Vec<_>>>()?;
                    t.weighted_sum(&losses, &weights)
                }),
            )
        }
        "concat_add" => {
            let c2 = rng.gen_range(1..=3);
            let inputs = vec![random(&[n, h, w, c], rng), random(&[n, h, w, c2], rng), random(&[n, h, w, c + c2], rng)];
            (
                inputs,
                Box::new(|t, s| {
                    let cat = t.concat(&[s[0], s[1]])?;
                    t.add(cat, s[2])
                }),
            )
        }
        other => panic!("no gradient case for {other}"),
    }
}

fn criterion_1() -> Outcome {
    let ops = [
        "conv2d",
        "depthwise",
        "dense",
        "relu",
        "max_pool",
        "avg_pool",
        "global_avg_pool",
        "batch_norm_train",
        "batch_norm_infer",
        "softmax_exit_loss",
        "weighted_total",
        "concat_add",
    ];
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for (k, op) in ops.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
        let mut op_worst = 0.0f64;
        let mut checked = 0;
        for _ in 0..GRAD_CASES {
            let (inputs, build) = grad_case(op, &mut rng);
            let r = finite_difference_check(|t, s| build(t, s), &inputs, 1e-6).map_err(|e| format!("{op}: {e}"))?;
            op_worst = op_worst.max(r.max_relative_error);
            checked += r.checked;
        }
        if op_worst >= GRAD_TOL || checked == 0 {
            failures.push(format!("{op} max rel err {op_worst:.2e}"));
        }
        worst = worst.max(op_worst);
    }
    check(
        failures.is_empty(),
        format!(
            "{} ops x {GRAD_CASES} random shapes, worst relative error {worst:.2e} (< {GRAD_TOL:e}){}",
            ops.len(),
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    )
}

fn tiny_net(name: &str, input: FeatureShape, seed: u64) -> ElasticNetwork {
    let g = BackboneConfig::preset(name, input).unwrap().build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    elasticize(Backbone::init(g, &mut rng).unwrap(), &HeadConfig::default(), &mut rng).unwrap()
}

fn criterion_2() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for c in [2usize, 10, 100] {
        let probs = vec![1.0 / c as f64; c];
        let got = training::exit_loss(&probs, 0, true).map_err(|e| e.to_string())?;
        let want = (c as f64).ln() / c as f64;
        ok &= (got - want).abs() < 1e-9;
        notes.push(format!("C={c}: {got:.12}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let losses: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..3.0)).collect();
    let total = training::total_loss(&losses, &LossConfig::uniform(6)).map_err(|e| e.to_string())?;
    let plain: f64 = losses.iter().sum();
    ok &= (total - plain).abs() < 1e-12;

    let net = tiny_net("mini-vgg", FeatureShape::new(28, 28, 1), 3);
    let mut weights = vec![1.0; net.exit_count()];
    weights[0] = 0.0;
    weights[2] = 0.0;
    let loss = LossConfig { weights, class_scaled: true };
    let x: Tensor<f32> = random_f32(&[4, 28, 28, 1], &mut rng).map(|v| v.abs());
    let mut dropout = ChaCha8Rng::seed_from_u64(8);
    let res = training::batch_gradients(&net, x, &[1, 4, 7, 9], &loss, Mode::Train, Some(&mut dropout))
        .map_err(|e| e.to_string())?;
    let grad = |name: String| res.grads.iter().find(|(n, _)| *n == name).map(|(_, g)| g.clone());
    let mut zero_heads = 0;
    for (i, e) in net.exits().iter().enumerate() {
        let k = grad(e.kernel_name()).ok_or("missing head gradient")?;
        let b = grad(e.bias_name()).ok_or("missing head gradient")?;
        let is_zero = k.data().iter().chain(b.data()).all(|&v| v == 0.0);
        if loss.weights[i] == 0.0 {
            ok &= is_zero;
            zero_heads += usize::from(is_zero);
        } else {
            ok &= !is_zero;
        }
    }
    check(
        ok,
        format!(
            "uniform loss = ln C / C ({}); unit-weight total equals plain sum; {zero_heads}/2 zero-weight heads get exactly zero gradient",
            notes.join(", ")
        ),
    )
}

fn exits_of(name: &str, family: Option<Family>) -> usize {
    let cfg = match family {
        Some(f) => BackboneConfig::mini(f, FeatureShape::new(32, 32, 3)),
        None => BackboneConfig::preset(name, FeatureShape::new(32, 32, 3)).unwrap(),
    };
    tiny_exits(cfg)
}

fn tiny_exits(cfg: BackboneConfig) -> usize {
    let g = cfg.build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    elasticize::<f32>(Backbone::init(g, &mut rng).unwrap(), &HeadConfig::default(), &mut rng)
        .unwrap()
        .exit_count()
}

fn criterion_3() -> Outcome {
    let mobilenet = exits_of("mini-mobilenet", None);
    let densenet = exits_of("mini-densenet", None);
    let vgg = exits_of("mini-vgg", None);
    let resnet = exits_of("", Some(Family::ResNet(ResNetConfig::with_layout(&[3, 4, 6, 3]))));
    let standin = build_concat_standin(FeatureShape::new(32, 32, 3), 3).map_err(|e| e.to_string())?;
    let kinds: Vec<AnchorKind> = standin.anchors().iter().map(|a| a.kind).collect();
    let standin_ok = kinds == [AnchorKind::BlockConcat, AnchorKind::BlockConcat, AnchorKind::FinalFeature];
    check(
        (mobilenet, densenet, vgg, resnet) == (13, 4, 5, 16) && standin_ok,
        format!(
            "mini-mobilenet {mobilenet}, mini-densenet {densenet}, mini-vgg {vgg}, mini-resnet(3,4,6,3) {resnet}, concat stand-in {kinds:?}"
        ),
    )
}

fn criterion_4() -> Outcome {
    let cfg = BackboneConfig::mini(Family::ResNet(ResNetConfig::with_layout(&[3, 4, 6, 4])), FeatureShape::new(32, 32, 3));
    let g = cfg.build().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let full: ElasticNetwork =
        elasticize(Backbone::init(g, &mut rng).unwrap(), &HeadConfig::default(), &mut rng).map_err(|e| e.to_string())?;
    let outputs = full.exit_count();
    let keep: BTreeSet<usize> = [2, 6, 9, 12].into_iter().collect();
    let pruned = prune_exits(full.clone(), &keep).map_err(|e| e.to_string())?;
    let anchors: Vec<usize> = pruned.exits().iter().map(|e| e.anchor).collect();

    let x = random_f32(&[3, 32, 32, 3], &mut rng);
    let before = full.forward_all_exits(&x, Mode::Eval, None).map_err(|e| e.to_string())?;
    let after = pruned.forward_all_exits(&x, Mode::Eval, None).map_err(|e| e.to_string())?;
    let bitwise = anchors.iter().zip(&after).all(|(&a, t)| {
        let orig = &before[a - 1];
        orig.data().iter().zip(t.data()).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    check(
        outputs == 17 && pruned.exit_count() == 5 && anchors == [2, 6, 9, 12, 17] && bitwise,
        format!("{outputs}-output network pruned to anchors {anchors:?}; surviving outputs bitwise unchanged: {bitwise}"),
    )
}

fn small_splits(per_class: usize, seed: u64) -> Result<DataSplits, String> {
    let mut cfg = RunConfig::default();
    cfg.data_dir = data_dir();
    cfg.per_class = Some(per_class);
    cfg.train.seed = seed;
    experiment::load_splits(&cfg).map_err(|e| e.to_string())
}

fn criterion_5() -> Outcome {
    let data = small_splits(20, 5)?;
    let mut cfg = RunConfig::default();
    cfg.backbone = "mini-mobilenet".into();
    cfg.train.seed = 5;
    let mut net = experiment::build_network(&cfg, data.train.shape, data.train.classes).map_err(|e| e.to_string())?;
    let backbone_before = net.params.checksum(|p| !p.head);
    let heads_before = net.params.checksum(|p| p.head);
    let loss = experiment::loss_config(&cfg, &net);
    let log = training::train_phase1(&mut net, &data.train, &data.val, &cfg.train, &loss).map_err(|e| e.to_string())?;
    let backbone_after = net.params.checksum(|p| !p.head);
    let heads_after = net.params.checksum(|p| p.head);
    let frozen = backbone_before == backbone_after && heads_before != heads_after;
    let constant_lr = log.records.len() == 10 && log.records.iter().all(|r| r.lr == 1e-3);

    let mut sched = PlateauScheduler::from_config(&cfg.train);
    let mut lrs = vec![sched.observe(2.0)];
    for _ in 0..10 {
        lrs.push(sched.observe(2.0));
    }
    let dropped_at = lrs.iter().position(|&lr| lr != 1e-3);
    let sched_ok = dropped_at == Some(10) && (lrs[10] - 1e-4).abs() < 1e-18;
    check(
        frozen && constant_lr && sched_ok,
        format!(
            "phase 1 ran {} epochs at lr 1e-3, backbone checksum {backbone_before:08x} -> {backbone_after:08x}; lr after stagnant epochs 1..10: {:?}",
            log.records.len(),
            &lrs[1..]
        ),
    )
}

/// Six nested loops, summing (kh, kw, ci) in row-major order from zero.
fn naive_conv(x: &Tensor<f32>, w: &Tensor<f32>, stride: usize, pad: Padding) -> Tensor<f32> {
    let s = x.shape();
    let (n, h, wd, cin) = (s[0], s[1], s[2], s[3]);
    let (k, cout) = (w.shape()[0], w.shape()[3]);
    let (oh_n, top) = extent(h, k, stride, pad);
    let (ow_n, left) = extent(wd, k, stride, pad);
    let mut out = Vec::with_capacity(n * oh_n * ow_n * cout);
    for i in 0..n {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                for co in 0..cout {
                    let mut acc = 0.0f32;
                    for kh in 0..k {
                        for kw in 0..k {
                            let ih = (oh * stride + kh) as isize - top as isize;
                            let iw = (ow * stride + kw) as isize - left as isize;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.data()[((i * h + ih as usize) * wd + iw as usize) * cin + ci]
                                    * w.data()[((kh * k + kw) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(vec![n, oh_n, ow_n, cout], out).unwrap()
}

fn naive_depthwise(x: &Tensor<f32>, w: &Tensor<f32>, stride: usize, pad: Padding) -> Tensor<f32> {
    let s = x.shape();
    let (n, h, wd, c) = (s[0], s[1], s[2], s[3]);
    let k = w.shape()[0];
    let (oh_n, top) = extent(h, k, stride, pad);
    let (ow_n, left) = extent(wd, k, stride, pad);
    let mut out = Vec::with_capacity(n * oh_n * ow_n * c);
    for i in 0..n {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                for ch in 0..c {
                    let mut acc = 0.0f32;
                    for kh in 0..k {
                        for kw in 0..k {
                            let ih = (oh * stride + kh) as isize - top as isize;
                            let iw = (ow * stride + kw) as isize - left as isize;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                continue;
                            }
                            acc += x.data()[((i * h + ih as usize) * wd + iw as usize) * c + ch]
                                * w.data()[(kh * k + kw) * c + ch];
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(vec![n, oh_n, ow_n, c], out).unwrap()
}

/// Output size and leading pad; `same` puts the extra pixel at the end.
fn extent(input: usize, k: usize, stride: usize, pad: Padding) -> (usize, usize) {
    match pad {
        Padding::Valid => ((input - k) / stride + 1, 0),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            (out, total / 2)
        }
    }
}

fn scan_oracle(costs: &[u64], limit: f64) -> Option<usize> {
    let mut best = None;
    for (i, &c) in costs.iter().enumerate() {
        if c as f64 <= limit {
            best = Some(i + 1);
        }
    }
    best
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut conv_cases = 0;
    for _ in 0..300 {
        let (h, w, c) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=4));
        let n = rng.gen_range(1..=2);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let pad = if k > h.min(w) { Padding::Same } else { padding(&mut rng) };
        let x = random_f32(&[n, h, w, c], &mut rng);
        let cout = rng.gen_range(1..=4);
        let wc = random_f32(&[k, k, c, cout], &mut rng);
        let wd = random_f32(&[k, k, c], &mut rng);
        let got = layers::conv2d(&x, &wc, None, stride, pad).map_err(|e| e.to_string())?;
        if got != naive_conv(&x, &wc, stride, pad) {
            return Err(format!("conv2d differs from the loop oracle at {h}x{w}x{c}, k={k}, stride={stride}, {pad:?}"));
        }
        let got = layers::depthwise_conv2d(&x, &wd, None, stride, pad).map_err(|e| e.to_string())?;
        if got != naive_depthwise(&x, &wd, stride, pad) {
            return Err(format!("depthwise differs from the loop oracle at {h}x{w}x{c}, k={k}, stride={stride}, {pad:?}"));
        }
        conv_cases += 1;
    }

    for _ in 0..1000 {
        let rows = rng.gen_range(1..=10);
        let costs: Vec<u64> = (0..rows).map(|_| rng.gen_range(0..1000)).collect();
        let table = CostTable {
            rows: costs
                .iter()
                .enumerate()
                .map(|(i, &c)| ExitCost { exit: i + 1, conv_depth: i + 1, params: c, flops: c })
                .collect(),
        };
        let limit = rng.gen_range(0.0..1100.0f64).floor();
        let metric = if rng.gen_bool(0.5) { Metric::Flops } else { Metric::Params };
        let got = select_exit(&table, Budget::new(limit, metric).unwrap());
        let ok = match (scan_oracle(&costs, limit), got) {
            (Some(want), Ok(e)) => want == e,
            (None, Err(Error::BudgetInfeasible { .. })) => true,
            _ => false,
        };
        if !ok {
            return Err(format!("select_exit disagrees with the scan oracle on {costs:?} at limit {limit}"));
        }
    }

    let mut counted = Vec::new();
    for name in KNOWN_BACKBONES {
        for input in [FeatureShape::new(32, 32, 3), FeatureShape::new(28, 28, 1)] {
            let g = BackboneConfig::preset(name, input).and_then(|c| c.build()).map_err(|e| e.to_string())?;
            let (formula, enumerated) = (g.formula_params(None), g.enumerated_params(None));
            if formula != enumerated {
                return Err(format!("{name}: closed-form {formula} vs enumerated {enumerated} parameters"));
            }
            let table = backbone_cost_audit(&g, 10).map_err(|e| e.to_string())?;
            if !table.is_strictly_increasing() {
                return Err(format!("{name}: exit costs are not strictly increasing"));
            }
            if input.c == 3 {
                counted.push(format!("{name} {formula}"));
            }
        }
    }
    let g = build_full_audit_graph("densenet-169").map_err(|e| e.to_string())?;
    let depths: Vec<usize> = g.anchors().iter().map(|a| g.conv_depth(a.node)).collect();
    check(
        depths == [14, 39, 104, 168],
        format!(
            "{conv_cases} conv/depthwise cases exact; 1000 select_exit instances match; params agree ({}); densenet-169 anchor depths {depths:?}",
            counted.join(", ")
        ),
    )
}

const SEEDS: [u64; 3] = [1, 2, 3];

struct DeskRuns {
    elastic: Vec<(f64, MetricsLog)>,
    plain: Vec<(f64, MetricsLog)>,
    densenet: Vec<Vec<f64>>,
}

fn desk_config(backbone: &str, elastic: bool, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.backbone = backbone.into();
    cfg.elastic = elastic;
    cfg.data_dir = data_dir();
    cfg.per_class = Some(500);
    cfg.train.phase1_epochs = 2;
    cfg.train.phase2_epochs = 15;
    cfg.train.seed = seed;
    cfg
}

fn desk_runs() -> Result<DeskRuns, String> {
    let (pool, official): (Dataset, Option<Dataset>) =
        experiment::load_raw(elastic_core::config::DatasetKind::Mnist, &data_dir()).map_err(|e| e.to_string())?;
    let mut runs = DeskRuns { elastic: Vec::new(), plain: Vec::new(), densenet: Vec::new() };
    for seed in SEEDS {
        let base = desk_config("mini-mobilenet", true, seed);
        let data = experiment::prepare(&base, &pool, official.as_ref()).map_err(|e| e.to_string())?;
        for (backbone, elastic) in [("mini-mobilenet", true), ("mini-mobilenet", false), ("mini-densenet", true)] {
            let start = Instant::now();
            let cfg = desk_config(backbone, elastic, seed);
            let out = experiment::run_with_data(&cfg, &data).map_err(|e| e.to_string())?;
            if let Some(reason) = &out.log.halted {
                return Err(format!("{backbone} seed {seed} halted: {reason}"));
            }
            let errors = out.test_errors.ok_or("no test split")?;
            eprintln!(
                "  {backbone} {} seed {seed}: test errors {:?} ({:.0}s)",
                if elastic { "elastic" } else { "plain" },
                errors.iter().map(|e| (e * 10000.0).round() / 100.0).collect::<Vec<_>>(),
                start.elapsed().as_secs_f64()
            );
            let last = *errors.last().unwrap();
            match (backbone, elastic) {
                ("mini-densenet", _) => runs.densenet.push(errors),
                (_, true) => runs.elastic.push((last, out.log)),
                _ => runs.plain.push((last, out.log)),
            }
        }
    }
    Ok(runs)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let all: Vec<f64> = v.collect();
    all.iter().sum::<f64>() / all.len() as f64
}

fn criterion_7(runs: &DeskRuns) -> Outcome {
    let pairs: Vec<(f64, f64)> = runs.elastic.iter().zip(&runs.plain).map(|(e, p)| (e.0 * 100.0, p.0 * 100.0)).collect();
    let wins = pairs.iter().filter(|(e, p)| *e <= p + 0.5).count();
    let (me, mp) = (mean(pairs.iter().map(|p| p.0)), mean(pairs.iter().map(|p| p.1)));
    let detail: Vec<String> = SEEDS
        .iter()
        .zip(&pairs)
        .map(|(s, (e, p))| format!("seed {s}: elastic {e:.2}% vs plain {p:.2}%"))
        .collect();
    check(
        wins >= 2 && me <= mp,
        format!("{}; elastic within +0.5pp on {wins}/3 seeds; mean {me:.2}% vs {mp:.2}%", detail.join(", ")),
    )
}

fn criterion_8(runs: &DeskRuns) -> Outcome {
    let exits = runs.densenet[0].len();
    let means: Vec<f64> = (0..exits).map(|i| mean(runs.densenet.iter().map(|e| e[i] * 100.0))).collect();
    let ordered = means.windows(2).enumerate().all(|(i, w)| {
        let last_pair = i + 2 == exits;
        w[1] <= w[0] || (last_pair && w[1] - w[0] <= 1.0)
    });
    check(
        ordered,
        format!(
            "mini-densenet mean per-exit test error over seeds {SEEDS:?}: {}",
            means.iter().map(|m| format!("{m:.2}%")).collect::<Vec<_>>().join(" -> ")
        ),
    )
}

fn criterion_9(runs: &DeskRuns) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let el = dir.path().join("elastic.csv");
    let plain = dir.path().join("plain.csv");
    std::fs::write(&el, metrics::to_csv(&runs.elastic[0].1)).map_err(|e| e.to_string())?;
    std::fs::write(&plain, metrics::to_csv(&runs.plain[0].1)).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for name in ["a.svg", "b.svg"] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_elastic"))
            .arg("curves")
            .args([&el, &plain])
            .args(["--labels", "elastic,plain", "--out"])
            .arg(&out)
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("curves exited with {status}"));
        }
        outputs.push(std::fs::read(&out).map_err(|e| e.to_string())?);
    }
    let svg = String::from_utf8_lossy(&outputs[0]);
    let curves = svg.matches("<polyline").count();
    let dashed = svg.matches("<polyline").zip(svg.split("<polyline").skip(1)).filter(|(_, s)| {
        s.split("/>").next().is_some_and(|el| el.contains("stroke-dasharray"))
    });
    let dashed = dashed.count();
    check(
        outputs[0] == outputs[1] && curves == 4 && dashed == 2,
        format!(
            "elastic-vs-plain figure with {curves} curves ({dashed} validation), {} bytes, byte-identical across runs: {}",
            outputs[0].len(),
            outputs[0] == outputs[1]
        ),
    )
}

fn criterion_10() -> Outcome {
    let mut checked = Vec::new();
    for name in ["mini-vgg", "mini-mobilenet", "mini-densenet", "mini-resnet"] {
        let net = tiny_net(name, FeatureShape::new(32, 32, 3), 10);
        let bytes = encode(&net).map_err(|e| e.to_string())?;
        let back = decode(&bytes).map_err(|e| e.to_string())?;
        let same_bits = net.params.iter().zip(back.params.iter()).all(|(a, b)| {
            a.name == b.name
                && a.value.shape() == b.value.shape()
                && a.value.data().iter().zip(b.value.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        });
        let same = same_bits
            && net.params.len() == back.params.len()
            && net.graph() == back.graph()
            && net.exits() == back.exits()
            && encode(&back).map_err(|e| e.to_string())? == bytes;
        if !same {
            return Err(format!("{name}: round trip changed the network"));
        }
        let mut corrupt = bytes.clone();
        let at = corrupt.len() - 4 - net.params.numel() * 2;
        corrupt[at] ^= 0x01;
        match decode(&corrupt) {
            Err(Error::Checkpoint { field: "checksum", .. }) => {}
            other => return Err(format!("{name}: corrupted payload gave {:?}", other.map(|_| ()))),
        }
        checked.push(name);
    }
    Ok(format!("bitwise round trip and checksum detection for {}", checked.join(", ")))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>().map(String::as_str).or(p.downcast_ref::<&str>().copied()).unwrap_or("?")
        )),
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |n: usize, title: &'static str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let r = guarded(f);
        let secs = start.elapsed().as_secs_f64();
        print_line(n, title, &r, secs);
        results.push((n, title, r, secs));
    };
    run(1, "gradient correctness", &criterion_1);
    run(2, "loss math", &criterion_2);
    run(3, "exit attachment counts", &criterion_3);
    run(4, "exit pruning", &criterion_4);
    run(5, "two-phase training contract", &criterion_5);
    run(6, "oracle equivalence", &criterion_6);

    let start = Instant::now();
    eprintln!("training desk-scale runs (3 seeds x 3 networks)...");
    let runs = panic::catch_unwind(desk_runs).unwrap_or_else(|_| Err("desk runs panicked".into()));
    let train_secs = start.elapsed().as_secs_f64();
    match &runs {
        Ok(r) => {
            run(7, "elastic vs plain mini-MobileNet", &|| criterion_7(r));
            run(8, "mini-DenseNet depth ordering", &|| criterion_8(r));
            run(9, "loss-curve artifact", &|| criterion_9(r));
        }
        Err(e) => {
            for (n, title) in [(7, "elastic vs plain mini-MobileNet"), (8, "mini-DenseNet depth ordering"), (9, "loss-curve artifact")] {
                run(n, title, &|| Err(format!("desk runs failed: {e}")));
            }
        }
    }
    eprintln!("desk-scale training took {train_secs:.0}s");
    run(10, "persistence", &criterion_10);

    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("acceptance: {}/{} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn print_line(n: usize, title: &str, r: &Outcome, secs: f64) {
    match r {
        Ok(d) => println!("criterion {n:>2} PASS  {title}: {d} [{secs:.1}s]"),
        Err(d) => println!("criterion {n:>2} FAIL  {title}: {d} [{secs:.1}s]"),
    }
}
