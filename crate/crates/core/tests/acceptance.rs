//! End-to-end acceptance checks. Runs without the libtest harness so each
//! check prints its verdict line even when it passes; the process exits
//! nonzero if any check fails.

use std::cell::Cell;
use std::sync::OnceLock;
use std::time::Instant;

use medmerge::analysis::{aggregate_mean_w, export_heatmap, HEATMAP_HEADER};
use medmerge::data::{generate_synth, Family, SplitSizes, SynthTaskSpec, TEST};
use medmerge::merge::{bake, bn_mean_init, sigmoid, zero_source};
use medmerge::metrics::macro_f1;
use medmerge::nn::{cross_entropy, Mode, Network};
use medmerge::params::names;
use medmerge::rng::{stream_rng, Stream};
use medmerge::train::*;
use medmerge::zoo::{init_head, init_params};
use medmerge::*;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::Rng;

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {id} [{name}] {tag}: {detail}");
    assert!(pass, "criterion {id} [{name}] failed: {detail}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

const SEEDS: u64 = 5;

/// Desk-scale experiment: source b learns blob shapes, source c learns
/// stripe frequencies, and the imbalanced target needs both.
struct Desk {
    target: LabeledDataset,
    ck_b: Checkpoint,
    ck_c: Checkpoint,
    pair: MergePair,
}

fn task(family: Family, train: usize, seed: u64) -> LabeledDataset {
    let mut s = SynthTaskSpec::new(
        family,
        SplitSizes {
            train,
            val: train / 4,
            test: train / 2,
        },
        seed,
    );
    if family == Family::Mixed {
        s.class_weights = vec![4.0, 2.0, 2.0, 1.0];
    }
    generate_synth(&s).unwrap()
}

fn lp_cfg(seed: u64) -> StageConfig {
    StageConfig::lp(seed).with_lr(1e-2).with_epochs(10).with_batch_size(32)
}

fn ft_cfg(seed: u64) -> StageConfig {
    StageConfig::ft(seed).with_lr(1e-4).with_epochs(3).with_batch_size(32)
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let spec = ModelSpec::smallnet(4);
        let src = StageConfig::ft(0).with_lr(3e-3).with_epochs(8).with_batch_size(32);
        let (ck_c, _) = train_source::<f32>(&spec, &task(Family::Frequency, 600, 1), &src, None, "A").unwrap();
        let (ck_b, _) = train_source::<f32>(&spec, &task(Family::Blob, 600, 2), &src, None, "B").unwrap();
        let pair = MergePair::new(ck_b.tree.clone(), ck_c.tree.clone(), spec).unwrap();
        Desk {
            target: task(Family::Mixed, 300, 3),
            ck_b,
            ck_c,
            pair,
        }
    })
}

/// Two-block smallnet pair in f64 with distinct, non-trivial BN state.
fn f64_pair(seed: u64) -> MergePair {
    let spec = ModelSpec::smallnet_prefix(2, 4);
    let mut rng = stream_rng(seed, Stream::Scratch, 7);
    let mut tree = |s| {
        let mut t = init_params::<f64>(&spec, s).unwrap();
        for i in 0..spec.blocks.len() {
            for name in names::bn_entries(i) {
                let mut v = t.require_as::<f64>(&name).unwrap();
                v.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(0.1..0.6));
                t.insert(name, v);
            }
        }
        t
    };
    let b = tree(seed);
    let c = tree(seed + 1);
    MergePair::new(b, c, spec).unwrap()
}

fn random_input(seed: u64, n: usize, spec: &ModelSpec) -> Tensor<f64> {
    let [c, h, w] = spec.input_shape;
    let mut rng = stream_rng(seed, Stream::Scratch, 3);
    Tensor::new(
        vec![n, c, h, w],
        (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn random_weights(seed: u64, spec: &ModelSpec, scale: f64) -> MergeWeights {
    let mut rng = stream_rng(seed, Stream::Scratch, 5);
    let layers = spec
        .blocks
        .iter()
        .map(|b| (0..b.out_channels).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect();
    MergeWeights::from_layers(layers).unwrap()
}

fn virtual_net(pair: &MergePair, mw: &MergeWeights, head: &ParamTree) -> Network<f64> {
    Network::virtual_merged(pair, mw, &bn_mean_init(pair).unwrap(), head).unwrap()
}

fn c1_merge_logit_gradients() {
    let start = Instant::now();
    let pair = f64_pair(21);
    let spec = pair.spec.clone();
    let head = init_head::<f64>(&spec, 5).unwrap();
    let mw = random_weights(22, &spec, 2.0);
    let x = random_input(23, 6, &spec);
    let labels = [0, 1, 2, 3, 1, 2];
    let loss_at = |mw: &MergeWeights| {
        let logits = virtual_net(&pair, mw, &head).forward(&x, Mode::Train).unwrap();
        cross_entropy(&logits, &labels).unwrap().0
    };

    let mut net = virtual_net(&pair, &mw, &head);
    let (_, g) = cross_entropy(&net.forward(&x, Mode::Train).unwrap(), &labels).unwrap();
    net.backward(&g).unwrap();
    let analytic: Vec<Vec<f64>> = (0..spec.blocks.len())
        .map(|i| {
            let key = format!("backbone.{i}.conv.merge_logits");
            let (_, p) = net.parameters_mut().into_iter().find(|(n, _)| *n == key).unwrap();
            p.grad.data().to_vec()
        })
        .collect();

    // gradient wrt the effective kernels, from a plain network over the
    // baked tree; same forward, independent backward path
    let bn = bn_mean_init(&pair).unwrap();
    let baked = bake::<f64>(&pair, &mw, &bn, &head).unwrap();
    let mut plain = Network::<f64>::from_tree(&spec, &baked).unwrap();
    let (_, g) = cross_entropy(&plain.forward(&x, Mode::Train).unwrap(), &labels).unwrap();
    plain.backward(&g).unwrap();
    let kernel_grads: Vec<Tensor<f64>> = (0..spec.blocks.len())
        .map(|i| {
            let key = format!("backbone.{i}.conv.weight");
            let (_, p) = plain.parameters_mut().into_iter().find(|(n, _)| *n == key).unwrap();
            p.grad.clone()
        })
        .collect();

    let h = 1e-5;
    let (mut worst_fd, mut worst_cf, mut kernels) = (0.0f64, 0.0f64, 0);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
    for (addr, alpha) in mw.iter() {
        let mut plus = mw.clone();
        plus.set_logit(addr, alpha + h).unwrap();
        let mut minus = mw.clone();
        minus.set_logit(addr, alpha - h).unwrap();
        let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        let an = analytic[addr.layer][addr.channel];

        let kb = pair
            .source_b
            .require_as::<f64>(&names::conv_weight(addr.layer))
            .unwrap();
        let kc = pair
            .source_c
            .require_as::<f64>(&names::conv_weight(addr.layer))
            .unwrap();
        let per = kb.numel() / kb.shape()[0];
        let span = addr.channel * per..(addr.channel + 1) * per;
        let gk = &kernel_grads[addr.layer].data()[span.clone()];
        let dot: f64 = gk
            .iter()
            .zip(&kb.data()[span.clone()])
            .zip(&kc.data()[span])
            .map(|((g, b), c)| g * (b - c))
            .sum();
        let slope = sigmoid(alpha) * sigmoid(-alpha);
        let closed = slope * dot;

        worst_fd = worst_fd.max(rel(fd, an));
        worst_cf = worst_cf.max(rel(closed, an));
        kernels += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "gradient",
        kernels == spec.kernel_count() && worst_fd <= 1e-6 && worst_cf <= 1e-10 && secs < 30.0,
        format!("{kernels} kernels, worst rel err vs FD {worst_fd:.2e}, vs closed form {worst_cf:.2e}, {secs:.1}s"),
    );
}

fn c2_endpoint_identity_and_bake_invariants() {
    let start = Instant::now();
    let mut runner = TestRunner::new(Config {
        cases: 24,
        failure_persistence: None,
        ..Config::default()
    });
    let (worst_equal, worst_bake) = (Cell::new(0.0f64), Cell::new(0.0f64));
    let outcome = runner.run(&(0u64..1_000_000, 0.1f64..6.0), |(seed, scale)| {
        let pair = f64_pair(seed);
        let spec = pair.spec.clone();
        let head = init_head::<f64>(&spec, seed).unwrap();
        let bn = bn_mean_init(&pair).unwrap();

        let endpoint = MergeWeights::init(&spec).unwrap().map_logits(|_| 1000.0);
        let tree = bake::<f64>(&pair, &endpoint, &bn, &head).unwrap();
        for i in 0..spec.blocks.len() {
            let name = names::conv_weight(i);
            prop_assert!(tree.get(&name).unwrap().bit_eq(pair.source_b.get(&name).unwrap()));
        }

        let x = random_input(seed ^ 0x5a, 32, &spec);
        let same = MergePair::new(pair.source_b.clone(), pair.source_b.clone(), spec.clone()).unwrap();
        let y1 = eval_logits(&mut virtual_net(&same, &random_weights(seed, &spec, scale), &head), &x).unwrap();
        let y2 = eval_logits(
            &mut virtual_net(&same, &random_weights(seed + 1, &spec, scale), &head),
            &x,
        )
        .unwrap();
        let d = y1.iter().zip(&y2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_equal.set(worst_equal.get().max(d));
        prop_assert!(d <= 1e-12, "equal sources moved by {d}");

        let mw = random_weights(seed + 2, &spec, scale);
        let mut virt = virtual_net(&pair, &mw, &head);
        let yv = eval_logits(&mut virt, &x).unwrap();
        let baked = bake::<f64>(&pair, &mw, &virt.bn_tree(), &virt.head_tree()).unwrap();
        let yb = eval_logits(&mut Network::<f64>::from_tree(&spec, &baked).unwrap(), &x).unwrap();
        let d = yv.iter().zip(&yb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_bake.set(worst_bake.get().max(d));
        prop_assert!(d <= 1e-10, "baked vs virtual differ by {d}");
        Ok(())
    });
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        "merge invariants",
        outcome.is_ok() && secs < 60.0,
        format!(
            "24 cases, endpoint bit-exact, equal-source drift {:.1e}, bake vs virtual {:.1e}, {secs:.1}s{}",
            worst_equal.get(),
            worst_bake.get(),
            outcome.err().map(|e| format!(" ({e})")).unwrap_or_default()
        ),
    );
}

fn c3_batch_norm_handling() {
    let d = desk();
    let init = bn_mean_init(&d.pair).unwrap();
    let mut exact = true;
    let mut entries = 0;
    for (name, tb) in d.pair.source_b.iter().filter(|(k, _)| names::is_bn(k)) {
        let tc = d.pair.source_c.get(name).unwrap();
        let mean: Vec<f32> = tb
            .to_f64_vec()
            .iter()
            .zip(tc.to_f64_vec())
            .map(|(a, b)| ((a + b) / 2.0) as f32)
            .collect();
        let got = init.require_as::<f32>(name).unwrap();
        exact &= got.data().iter().zip(&mean).all(|(a, b)| a.to_bits() == b.to_bits());
        entries += 1;
    }
    let (mut unfrozen, mut frozen) = (vec![], vec![]);
    for seed in 0..SEEDS {
        let (_, on) =
            run_merge_probe::<f32>(&d.pair, &d.target, &lp_cfg(seed), MedMergeOptions { frozen_bn: false }).unwrap();
        let (_, off) =
            run_merge_probe::<f32>(&d.pair, &d.target, &lp_cfg(seed), MedMergeOptions { frozen_bn: true }).unwrap();
        unfrozen.push(on.last().val_loss);
        frozen.push(off.last().val_loss);
    }
    let (mu, mf) = (median(unfrozen), median(frozen));
    verdict(
        3,
        "batch norm",
        exact && entries == 12 && mf > mu,
        format!("mean init exact over {entries} tensors: {exact}; median final LP val loss unfrozen {mu:.4} < frozen {mf:.4}"),
    );
}

fn c4_desk_ordering() {
    let start = Instant::now();
    let d = desk();
    let mut rows = vec![];
    for seed in 0..SEEDS {
        let (lp, ft) = (lp_cfg(seed), ft_cfg(seed));
        let test_f1 = |ck: &Checkpoint| evaluate_checkpoint::<f32>(ck, &d.target, TEST).unwrap().macro_f1;
        let mm = run_medmerge::<f32>(&d.pair, &d.target, &lp, &ft, MedMergeOptions::default()).unwrap();
        let (sa, _) = run_simple_average::<f32>(&d.pair, &d.target, &lp, &ft).unwrap();
        let (b, _) = run_lpft::<f32>(&d.ck_b, &d.target, &lp, &ft).unwrap();
        let (c, _) = run_lpft::<f32>(&d.ck_c, &d.target, &lp, &ft).unwrap();
        rows.push([test_f1(&mm.checkpoint), test_f1(&sa), test_f1(&b), test_f1(&c)]);
    }
    let col = |i: usize| median(rows.iter().map(|r| r[i]).collect());
    let (mm, sa, b, c) = (col(0), col(1), col(2), col(3));
    let secs = start.elapsed().as_secs_f64();
    verdict(
        4,
        "desk ordering",
        mm >= sa && mm >= b.max(c) && mm - b.min(c) >= 0.01 && secs < 600.0,
        format!(
            "median test macro-F1 medmerge {mm:.3}, simple average {sa:.3}, lp-ft b {b:.3}, lp-ft c {c:.3}; {secs:.0}s"
        ),
    );
}

fn c5_zero_source_probe() {
    let d = desk();
    let spec = d.pair.spec.clone();
    let pair = MergePair::new(d.pair.source_b.clone(), zero_source::<f32>(&spec).unwrap(), spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut means = vec![];
    let mut rows_ok = true;
    for seed in 0..SEEDS {
        let (net, _) = run_merge_probe::<f32>(&pair, &d.target, &lp_cfg(seed), MedMergeOptions::default()).unwrap();
        let mw = net.merge_weights().unwrap();
        means.push(aggregate_mean_w(&mw));
        let path = dir.path().join(format!("heatmap-{seed}.csv"));
        export_heatmap(&mw, &net.spec, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        rows_ok &= lines.len() == 1 + net.spec.blocks.len() && lines[0] == HEATMAP_HEADER;
    }
    let m = median(means.clone());
    verdict(
        5,
        "zero merge",
        m > 0.5 && rows_ok,
        format!(
            "median mean w toward the trained source {m:.5} over {means:.5?}; one CSV row per conv layer: {rows_ok}"
        ),
    );
}

/// Per-class counts by direct scan, no confusion matrix.
fn macro_f1_oracle(preds: &[usize], labels: &[usize], k: usize) -> f64 {
    let mut f1s = vec![];
    for c in 0..k {
        let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count();
        let predicted = preds.iter().filter(|&&p| p == c).count();
        let actual = labels.iter().filter(|&&l| l == c).count();
        if predicted == 0 && actual == 0 {
            continue;
        }
        let p = if predicted == 0 {
            0.0
        } else {
            tp as f64 / predicted as f64
        };
        let r = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
        f1s.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    f1s.iter().sum::<f64>() / f1s.len() as f64
}

fn c6_macro_f1_oracle() {
    let mut rng = stream_rng(6, Stream::Scratch, 0);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let k = rng.gen_range(2..7);
        let n = rng.gen_range(1..60);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        if macro_f1(&preds, &labels, k).unwrap().0 != macro_f1_oracle(&preds, &labels, k) {
            mismatches += 1;
        }
    }
    let hand = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap().0;
    // class 0: P 1/2, R 1 → 2/3; class 1: P 1, R 2/3 → 4/5
    let expected = (2.0 / 3.0 + 4.0 / 5.0) / 2.0;
    verdict(
        6,
        "metric oracle",
        mismatches == 0 && (hand - expected).abs() < 1e-15,
        format!("1000 random instances, {mismatches} mismatches; hand case {hand:.6}"),
    );
}

fn c7_reproducibility_and_io() {
    let d = desk();
    let dir = tempfile::tempdir().unwrap();
    let ck_path = dir.path().join("b.mmck");
    d.ck_b.save(&ck_path).unwrap();
    let back = Checkpoint::load(&ck_path).unwrap();
    let ck_ok = back.tree.bit_eq(&d.ck_b.tree) && back.manifest == d.ck_b.manifest;

    let ds_path = dir.path().join("target.mmds");
    d.target.save_packed(&ds_path).unwrap();
    let ds_ok = LabeledDataset::load_packed(&ds_path).unwrap() == d.target;

    let run = || run_medmerge::<f32>(&d.pair, &d.target, &lp_cfg(3), &ft_cfg(3), MedMergeOptions::default()).unwrap();
    let (r1, r2) = (run(), run());
    let mm_ok = r1.record == r2.record
        && r1.checkpoint.tree.bit_eq(&r2.checkpoint.tree)
        && r1.baked.tree.bit_eq(&r2.baked.tree)
        && r1.merge_weights == r2.merge_weights;
    let lpft = || run_lpft::<f32>(&d.ck_c, &d.target, &lp_cfg(3), &ft_cfg(3)).unwrap();
    let ((c1, rec1), (c2, rec2)) = (lpft(), lpft());
    let lpft_ok = rec1 == rec2 && c1.tree.bit_eq(&c2.tree);
    let bytes_ok = {
        let (p1, p2) = (dir.path().join("r1.mmck"), dir.path().join("r2.mmck"));
        r1.checkpoint.save(&p1).unwrap();
        r2.checkpoint.save(&p2).unwrap();
        std::fs::read(p1).unwrap() == std::fs::read(p2).unwrap()
    };
    verdict(
        7,
        "reproducibility",
        ck_ok && ds_ok && mm_ok && lpft_ok && bytes_ok,
        format!(
            "checkpoint round trip {ck_ok}, dataset round trip {ds_ok}, medmerge rerun {mm_ok}, lp-ft rerun {lpft_ok}, checkpoint bytes {bytes_ok}"
        ),
    );
}

fn c8_trainable_parameter_accounting() {
    let d = desk();
    let lp = lp_cfg(0).with_epochs(1);
    let (_, merge) = run_merge_probe::<f32>(&d.pair, &d.target, &lp, MedMergeOptions::default()).unwrap();
    let (_, record) = run_lp::<f32>(&d.ck_b, &d.target, &lp).unwrap();
    let probe = record.stages[0].trainable;
    let m = merge.trainable;
    // smallnet on 16×16: 32 channels × 2×2 after three pools into 4 classes
    let head = 32 * 2 * 2 * 4 + 4;
    let bn = 2 * (8 + 16 + 32);
    let n = 8 + 16 + 32;
    let ok = probe.head == head
        && probe.conv + probe.bn + probe.merge_logits == 0
        && m.head == probe.head
        && m.bn == bn
        && m.conv == 0
        && m.merge_logits == n
        && m.merge_logits == d.pair.spec.kernel_count();
    let total = m.head + m.bn + m.conv + m.merge_logits;
    verdict(
        8,
        "cost accounting",
        ok && total == probe.head + bn + n,
        format!(
            "medmerge probe {total} = lp head {} + bn {bn} + {n} merge logits",
            probe.head
        ),
    );
}

fn main() {
    let checks: [(u32, &str, fn()); 8] = [
        (1, "gradient", c1_merge_logit_gradients),
        (2, "merge invariants", c2_endpoint_identity_and_bake_invariants),
        (3, "batch norm", c3_batch_norm_handling),
        (4, "desk ordering", c4_desk_ordering),
        (5, "zero merge", c5_zero_source_probe),
        (6, "metric oracle", c6_macro_f1_oracle),
        (7, "reproducibility", c7_reproducibility_and_io),
        (8, "cost accounting", c8_trainable_parameter_accounting),
    ];
    let start = Instant::now();
    let handles: Vec<_> = checks
        .iter()
        .map(|&(id, name, check)| (id, name, std::thread::spawn(check)))
        .collect();
    let mut failed = 0;
    for (id, name, handle) in handles {
        if let Err(panic) = handle.join() {
            failed += 1;
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            // a failed verdict has already printed its line
            if !msg.starts_with("criterion") {
                println!("criterion {id} [{name}] FAIL: {msg}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.0}s",
        checks.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
