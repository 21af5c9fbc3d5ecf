//! Acceptance suite. Every criterion prints an explicit PASS/FAIL line
//! (run with `--nocapture` to see them on success) and fails the test on
//! FAIL.
//!
//! Criteria 6-8 train AWM-ResNet-14 at desk scale, which takes on the
//! order of hours on one CPU; their runs are shared through a lazy
//! static. Set `AWM_CIFAR10_DIR` to a directory with the CIFAR-10 binary
//! files to run them on real data; without it a deterministic synthetic
//! dataset in the same binary format is used.

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use awm::analytics;
use awm::awm::{AwmMode, AwmUnit};
use awm::checkpoint::Checkpoint;
use awm::config::ExperimentConfig;
use awm::data::{self, Dataset, NormStats};
use awm::net::{mapping_unit_count, Network, NetworkConfig, NetworkKind};
use awm::ops;
use awm::testing::{finite_diff_grad, random_tensor, rel_err};
use awm::train::{phase_at_epoch, DataBundle, EpochRecord, Phase, TrainConfig, Trainer};
use awm::{Param, Tensor, Var};

fn report(n: usize, name: &str, ok: bool, detail: &str) {
    println!(
        "acceptance criterion {n} ({name}): {} — {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

// ---------------------------------------------------------------------------
// criterion 1: gradient suite
// ---------------------------------------------------------------------------

/// Build a graph from leaf inputs, backprop, and compare every input
/// gradient against central finite differences; returns the worst
/// relative error.
fn fd_check(inputs: &[Tensor], graph: &dyn Fn(&[Var]) -> Var) -> f64 {
    let vars: Vec<Var> = inputs.iter().map(|t| Var::leaf(t.clone())).collect();
    let loss = graph(&vars);
    loss.backward().unwrap();
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = vars[i].grad().expect("input should receive gradient");
        let mut f = |t: &Tensor| {
            let mut probe = inputs.to_vec();
            probe[i] = t.clone();
            let vs: Vec<Var> = probe.iter().map(|t| Var::leaf(t.clone())).collect();
            graph(&vs).value().item()
        };
        let numeric = finite_diff_grad(x, &mut f);
        for j in 0..x.len() {
            worst = worst.max(rel_err(analytic.data()[j], numeric.data()[j]));
        }
    }
    worst
}

/// Like `fd_check`, but for graphs containing internal relu units. With a
/// kink at distance d inside [x−h, x+h] and slope jump Δ, the central
/// difference is off by Δ(h−d)/2h, which is exactly the second difference
/// over 2h; discounting that bound keeps the check valid at relu kinks
/// without loosening it anywhere smooth. Returns (worst discounted rel
/// err, probes checked, probes where the discount was material).
fn fd_check_smooth(inputs: &[Tensor], graph: &dyn Fn(&[Var]) -> Var) -> (f64, usize, usize) {
    let step = awm::testing::FD_STEP;
    let vars: Vec<Var> = inputs.iter().map(|t| Var::leaf(t.clone())).collect();
    let loss = graph(&vars);
    let f0 = loss.value().item();
    loss.backward().unwrap();
    let eval = |probe: &[Tensor]| {
        let vs: Vec<Var> = probe.iter().map(|t| Var::leaf(t.clone())).collect();
        graph(&vs).value().item()
    };
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut discounted = 0usize;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = vars[i].grad().expect("input should receive gradient");
        for j in 0..x.len() {
            let mut up = inputs.to_vec();
            up[i].data_mut()[j] += step;
            let fp = eval(&up);
            let mut down = inputs.to_vec();
            down[i].data_mut()[j] -= step;
            let fm = eval(&down);
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data()[j];
            let kink_bound = (fp + fm - 2.0 * f0).abs() / (2.0 * step);
            let excess = ((a - numeric).abs() - kink_bound).max(0.0);
            let e = excess / 1.0_f64.max(a.abs()).max(numeric.abs());
            if e < 1e-4 && rel_err(a, numeric) >= 1e-4 {
                discounted += 1;
            }
            worst = worst.max(e);
            checked += 1;
        }
    }
    (worst, checked, discounted)
}

/// Keep values away from activation kinks so the finite difference is
/// well defined.
fn away_from_zero(t: &Tensor) -> Tensor {
    t.map(|v| if v.abs() < 0.05 { v + 0.1 * v.signum() + if v == 0.0 { 0.1 } else { 0.0 } } else { v })
}

fn weighted(y: &Var, w: &Tensor) -> Var {
    ops::sum(&ops::mul(y, &Var::leaf(w.clone())).unwrap())
}

/// Per-element finite difference against a parameter, with the same
/// kink-bound discount as `fd_check_smooth`. Returns (worst discounted
/// rel err, probes where the discount was material).
fn param_fd_err(loss_fn: &dyn Fn() -> f64, p: &Param, analytic: &Tensor, idxs: &[usize]) -> (f64, usize) {
    let step = awm::testing::FD_STEP;
    let base = p.value().clone();
    let f0 = loss_fn();
    let mut worst = 0.0f64;
    let mut discounted = 0usize;
    for &i in idxs {
        let mut up = base.clone();
        up.data_mut()[i] += step;
        p.set_value(up);
        let fp = loss_fn();
        let mut down = base.clone();
        down.data_mut()[i] -= step;
        p.set_value(down);
        let fm = loss_fn();
        p.set_value(base.clone());
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let kink_bound = (fp + fm - 2.0 * f0).abs() / (2.0 * step);
        let excess = ((a - numeric).abs() - kink_bound).max(0.0);
        let e = excess / 1.0_f64.max(a.abs()).max(numeric.abs());
        if e < 1e-4 && rel_err(a, numeric) >= 1e-4 {
            discounted += 1;
        }
        worst = worst.max(e);
    }
    (worst, discounted)
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst_overall: (f64, &'static str) = (0.0, "none");
    let mut total_checked = 0usize;
    let mut total_skipped = 0usize;
    let track = |err: f64, name: &'static str, worst: &mut (f64, &'static str)| {
        if err > worst.0 {
            *worst = (err, name);
        }
    };

    for inst in 0..20u64 {
        let stride = 1 + (inst as usize) % 2;

        // conv2d
        let x = random_tensor(&mut rng, &[2, 3, 7, 7], 1.0);
        let k = random_tensor(&mut rng, &[4, 3, 3, 3], 0.6);
        let w = random_tensor(&mut rng, &[2, 4, if stride == 1 { 7 } else { 4 }, if stride == 1 { 7 } else { 4 }], 1.0);
        let err = fd_check(&[x, k], &|v| {
            weighted(&ops::conv2d(&v[0], &v[1], stride, 1).unwrap(), &w)
        });
        track(err, "conv2d", &mut worst_overall);

        // fully_connected
        let x = random_tensor(&mut rng, &[3, 5], 1.0);
        let fw = random_tensor(&mut rng, &[4, 5], 0.8);
        let b = random_tensor(&mut rng, &[4], 0.5);
        let lw = random_tensor(&mut rng, &[3, 4], 1.0);
        let err = fd_check(&[x, fw, b], &|v| {
            weighted(&ops::fully_connected(&v[0], &v[1], &v[2]).unwrap(), &lw)
        });
        track(err, "fully_connected", &mut worst_overall);

        // activations
        let x = away_from_zero(&random_tensor(&mut rng, &[4, 6], 1.5));
        let lw = random_tensor(&mut rng, &[4, 6], 1.0);
        let err = fd_check(&[x.clone()], &|v| weighted(&ops::relu(&v[0]), &lw));
        track(err, "relu", &mut worst_overall);
        let err = fd_check(&[x], &|v| weighted(&ops::sigmoid(&v[0]), &lw));
        track(err, "sigmoid", &mut worst_overall);

        // global_avg_pool
        let x = random_tensor(&mut rng, &[2, 5, 4, 4], 1.0);
        let lw = random_tensor(&mut rng, &[2, 5], 1.0);
        let err = fd_check(&[x], &|v| weighted(&ops::global_avg_pool(&v[0]).unwrap(), &lw));
        track(err, "global_avg_pool", &mut worst_overall);

        // batch_norm, train and eval
        let x = random_tensor(&mut rng, &[4, 3, 3, 3], 1.0);
        let gamma = random_tensor(&mut rng, &[3], 0.8).map(|v| v + 1.0);
        let beta = random_tensor(&mut rng, &[3], 0.5);
        let lw = random_tensor(&mut rng, &[4, 3, 3, 3], 1.0);
        for train in [true, false] {
            let err = fd_check(&[x.clone(), gamma.clone(), beta.clone()], &|v| {
                let stats = ops::BnStats::new(3);
                stats.set(Tensor::zeros(&[3]), Tensor::full(&[3], 1.3));
                weighted(&ops::batch_norm(&v[0], &v[1], &v[2], &stats, train).unwrap(), &lw)
            });
            track(err, if train { "batch_norm train" } else { "batch_norm eval" }, &mut worst_overall);
        }

        // softmax cross entropy
        let logits = random_tensor(&mut rng, &[4, 6], 2.0);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
        let lab = labels.clone();
        let err = fd_check(&[logits], &|v| ops::softmax_cross_entropy(&v[0], &lab).unwrap());
        track(err, "softmax_cross_entropy", &mut worst_overall);

        // infer_weights (through sigmoid + normalization), inputs and unit
        // parameters
        let mut unit_rng = ChaCha8Rng::seed_from_u64(2000 + inst);
        let unit = AwmUnit::new("fd.awm", &[6, 6], 4, &mut unit_rng).unwrap();
        let z = random_tensor(&mut rng, &[3, 12], 1.0);
        let lw = random_tensor(&mut rng, &[3, 2], 1.0);
        let err = fd_check(&[z.clone()], &|v| weighted(&unit.infer_weights(&v[0]).unwrap(), &lw));
        track(err, "infer_weights (input)", &mut worst_overall);
        {
            for p in unit.params() {
                p.zero_grad();
            }
            let loss = weighted(&unit.infer_weights(&Var::leaf(z.clone())).unwrap(), &lw);
            loss.backward().unwrap();
            let loss_fn = || weighted(&unit.infer_weights(&Var::leaf(z.clone())).unwrap(), &lw).value().item();
            for p in unit.params() {
                let g = p.grad().expect("awm param gradient");
                let idxs: Vec<usize> = (0..p.numel().min(4)).collect();
                let (err, sk) = param_fd_err(&loss_fn, &p, &g, &idxs);
                total_skipped += sk;
                track(err, "infer_weights (params)", &mut worst_overall);
                p.zero_grad();
            }
        }

        // weighted_merge_sum
        let f = random_tensor(&mut rng, &[2, 3, 4, 4], 1.0);
        let xsc = random_tensor(&mut rng, &[2, 3, 4, 4], 1.0);
        let lam = random_tensor(&mut rng, &[2, 2], 0.4).map(|v| 0.5 + v * 0.5);
        let lw = random_tensor(&mut rng, &[2, 3, 4, 4], 1.0);
        let err = fd_check(&[f, xsc, lam], &|v| {
            weighted(&ops::weighted_merge_sum(&v[0], &v[1], &v[2]).unwrap(), &lw)
        });
        track(err, "weighted_merge_sum", &mut worst_overall);

        // weighted_merge_concat, 3 paths
        let p0 = random_tensor(&mut rng, &[2, 2, 3, 3], 1.0);
        let p1 = random_tensor(&mut rng, &[2, 3, 3, 3], 1.0);
        let p2 = random_tensor(&mut rng, &[2, 2, 3, 3], 1.0);
        let lam = random_tensor(&mut rng, &[2, 3], 0.3).map(|v| 0.4 + v);
        let lw = random_tensor(&mut rng, &[2, 7, 3, 3], 1.0);
        let err = fd_check(&[p0, p1, p2, lam], &|v| {
            weighted(
                &ops::weighted_merge_concat(&v[0..3], &v[3]).unwrap(),
                &lw,
            )
        });
        track(err, "weighted_merge_concat", &mut worst_overall);
    }

    // full AWM residual block composed from the public ops: two
    // conv-bn(-relu) stages, weight inference from the two paths, weighted
    // merge, final relu
    for inst in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + inst);
        let mut unit_rng = ChaCha8Rng::seed_from_u64(4000 + inst);
        let unit = AwmUnit::new("block.awm", &[4, 4], 4, &mut unit_rng).unwrap();
        let x = random_tensor(&mut rng, &[2, 4, 5, 5], 1.0);
        let k1 = random_tensor(&mut rng, &[4, 4, 3, 3], 0.4);
        let k2 = random_tensor(&mut rng, &[4, 4, 3, 3], 0.4);
        let g1 = random_tensor(&mut rng, &[4], 0.3).map(|v| v + 1.0);
        let b1 = random_tensor(&mut rng, &[4], 0.3);
        let g2 = random_tensor(&mut rng, &[4], 0.3).map(|v| v + 1.0);
        let b2 = random_tensor(&mut rng, &[4], 0.3);
        let lw = random_tensor(&mut rng, &[2, 4, 5, 5], 1.0);
        let block = |v: &[Var]| -> Var {
            let s1 = ops::BnStats::new(4);
            let s2 = ops::BnStats::new(4);
            let h = ops::conv2d(&v[0], &v[1], 1, 1).unwrap();
            let h = ops::relu(&ops::batch_norm(&h, &v[3], &v[4], &s1, true).unwrap());
            let h = ops::conv2d(&h, &v[2], 1, 1).unwrap();
            let f = ops::batch_norm(&h, &v[5], &v[6], &s2, true).unwrap();
            let z = unit.embed_paths(&[f.clone(), v[0].clone()]).unwrap();
            let lam = unit.infer_weights(&z).unwrap();
            let merged = ops::weighted_merge_sum(&f, &v[0], &lam).unwrap();
            weighted(&ops::relu(&merged), &lw)
        };
        let (err, checked, sk) = fd_check_smooth(
            &[x.clone(), k1.clone(), k2.clone(), g1.clone(), b1.clone(), g2.clone(), b2.clone()],
            &block,
        );
        total_checked += checked;
        total_skipped += sk;
        track(err, "awm residual block (inputs)", &mut worst_overall);
        for p in unit.params() {
            p.zero_grad();
        }
        let inputs = [x, k1, k2, g1, b1, g2, b2];
        let vars: Vec<Var> = inputs.iter().map(|t| Var::leaf(t.clone())).collect();
        block(&vars).backward().unwrap();
        let loss_fn = || {
            let vs: Vec<Var> = inputs.iter().map(|t| Var::leaf(t.clone())).collect();
            block(&vs).value().item()
        };
        for p in unit.params() {
            let g = p.grad().expect("awm param gradient in block");
            let idxs: Vec<usize> = (0..p.numel().min(3)).collect();
            let (err, sk) = param_fd_err(&loss_fn, &p, &g, &idxs);
            total_skipped += sk;
            track(err, "awm residual block (unit params)", &mut worst_overall);
            p.zero_grad();
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    let kink_ok = total_skipped * 100 <= total_checked; // at most 1% kink rescues
    let ok = worst_overall.0 < 1e-4 && elapsed < 120.0 && kink_ok;
    report(
        1,
        "gradient suite",
        ok,
        &format!(
            "worst rel err {:.3e} ({}), {elapsed:.1}s, {total_skipped}/{total_checked} block probes needed the relu kink discount",
            worst_overall.0, worst_overall.1
        ),
    );
}

// ---------------------------------------------------------------------------
// criteria 2-3: structure and parameter counts
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_mapping_unit_counts() {
    let expected = [(14usize, 6usize), (20, 9), (32, 15), (44, 21), (56, 27), (110, 54)];
    let mut ok = true;
    let mut detail = String::new();
    for (depth, want) in expected {
        let formula = mapping_unit_count(depth).unwrap();
        let net = Network::build(&NetworkConfig::new(NetworkKind::ResnetAwm, depth, 10), 0).unwrap();
        let built = net.awm_units().len();
        if formula != want || built != want {
            ok = false;
        }
        detail.push_str(&format!("d{depth}:{formula}/{built} "));
    }
    report(2, "mapping unit counts", ok, detail.trim());
}

#[test]
fn criterion_3_parameter_counts() {
    let plain = Network::build(&NetworkConfig::new(NetworkKind::ResnetPlain, 110, 10), 0)
        .unwrap()
        .count_parameters();
    let awm_net = Network::build(&NetworkConfig::new(NetworkKind::ResnetAwm, 110, 10), 0).unwrap();
    let census = awm_net.count_parameters();

    let plain_ref = 1.70e6;
    let awm_ref = 1.78e6;
    let plain_dev = (plain.total as f64 - plain_ref).abs() / plain_ref;
    let awm_dev = (census.total as f64 - awm_ref).abs() / awm_ref;

    // closed-form per-unit overhead: 2Ce + e + 2e + 2 with e the hidden
    // width and C the block channel count (both paths share it)
    let e = 16usize;
    let mut closed = 0usize;
    for unit in awm_net.awm_units() {
        let c_sum: usize = unit.channel_dims().iter().sum();
        closed += c_sum * e + e + 2 * e + 2;
    }
    let ok = plain_dev <= 0.03 && awm_dev <= 0.03 && census.awm == closed;
    report(
        3,
        "parameter counts",
        ok,
        &format!(
            "plain {} ({:.2}% off 1.70M), awm {} ({:.2}% off 1.78M), overhead {} vs closed form {}",
            plain.total,
            plain_dev * 100.0,
            census.total,
            awm_dev * 100.0,
            census.awm,
            closed
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 4: equal-weight reduction and normalization
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_equal_weight_reduction() {
    let net = Network::build(&NetworkConfig::new(NetworkKind::ResnetAwm, 14, 10), 9).unwrap();
    net.set_awm_mode(AwmMode::FixedEqual);
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let x = random_tensor(&mut rng, &[4, 3, 32, 32], 1.0);
    let out = net.forward(&x, false, true).unwrap();
    let (oracle_blocks, _) = common::manual_resnet_forward(&net, &x, 0.5, 0.5);
    let mut worst_block = 0.0f64;
    for (got, want) in out.block_outputs.iter().zip(&oracle_blocks) {
        worst_block = worst_block.max(common::max_rel_err(got, want));
    }

    // sum-to-one over 10,000 random unit inputs in active mode
    let mut worst_sum = 0.0f64;
    let mut checked = 0usize;
    let mut unit_rng = ChaCha8Rng::seed_from_u64(401);
    while checked < 10_000 {
        let unit = AwmUnit::new("acc.awm", &[8, 8], 5, &mut unit_rng).unwrap();
        for _ in 0..5 {
            let z = random_tensor(&mut unit_rng, &[100, 16], 2.0);
            let lam = unit.infer_weights(&Var::leaf(z)).unwrap();
            for r in 0..100 {
                let s: f64 = (0..2).map(|c| lam.value().at2(r, c)).sum();
                worst_sum = worst_sum.max((s - 1.0).abs());
            }
            checked += 100;
        }
    }

    let ok = worst_block <= 1e-15 && worst_sum <= 1e-9;
    report(
        4,
        "equal-weight reduction",
        ok,
        &format!("block rel err {worst_block:.3e}, worst |Σλ−1| {worst_sum:.3e} over {checked} inputs"),
    );
}

// ---------------------------------------------------------------------------
// criterion 5: freeze integrity
// ---------------------------------------------------------------------------

fn group_bits(trainer: &Trainer, group: awm::ParamGroup) -> Vec<Vec<u64>> {
    trainer
        .optimizer
        .params()
        .iter()
        .filter(|p| p.group() == group)
        .map(|p| p.value().data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn criterion_5_freeze_integrity() {
    let train_set = data::generate_synthetic(10, 10, 501);
    let test_set = data::generate_synthetic(10, 3, 502);
    let norm = NormStats::compute(&train_set);
    let bundle = DataBundle { train: &train_set, test: &test_set, norm };
    let net = Network::build(&NetworkConfig::new(NetworkKind::ResnetAwm, 8, 10), 55).unwrap();
    let cfg = TrainConfig {
        epochs: 9,
        batch_size: 32,
        lr_milestones: vec![],
        alternation: 3,
        seed: 55,
        eval_limit: 30,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(net, cfg).unwrap();

    let mut ok = true;
    let mut detail = String::new();
    let mut awm_phase_snapshots: Vec<Vec<Vec<u64>>> = Vec::new();
    for epoch in 0..9 {
        let phase = phase_at_epoch(3, epoch);
        let bb_before = group_bits(&trainer, awm::ParamGroup::Backbone);
        let aw_before = group_bits(&trainer, awm::ParamGroup::Awm);
        trainer.run_epoch(&bundle).unwrap();
        let bb_after = group_bits(&trainer, awm::ParamGroup::Backbone);
        let aw_after = group_bits(&trainer, awm::ParamGroup::Awm);
        match phase {
            Phase::Awm => {
                if bb_before != bb_after {
                    ok = false;
                    detail.push_str(&format!("backbone moved in awm phase (epoch {epoch}); "));
                }
                if aw_before == aw_after {
                    ok = false;
                    detail.push_str(&format!("awm frozen in its own phase (epoch {epoch}); "));
                }
                awm_phase_snapshots.push(aw_after.clone());
            }
            Phase::Backbone | Phase::BackboneFixedEqual => {
                if aw_before != aw_after {
                    ok = false;
                    detail.push_str(&format!("awm moved in backbone phase (epoch {epoch}); "));
                }
                if bb_before == bb_after {
                    ok = false;
                    detail.push_str(&format!("backbone frozen in its own phase (epoch {epoch}); "));
                }
            }
            Phase::Joint => unreachable!(),
        }
    }
    // the awm parameters must differ across its two active phases
    if awm_phase_snapshots.len() >= 4 {
        let end_first = &awm_phase_snapshots[2]; // epochs 3,4,5 are awm
        let end_second = awm_phase_snapshots.last().unwrap();
        if end_first == end_second {
            ok = false;
            detail.push_str("awm identical across its two phases; ");
        }
    }
    if detail.is_empty() {
        detail = "frozen groups bit-stable in every phase, trained groups moved".into();
    }
    report(5, "freeze integrity", ok, detail.trim());
}

// ---------------------------------------------------------------------------
// criteria 6-8: desk-scale training runs (shared)
// ---------------------------------------------------------------------------

struct RunOut {
    t: usize,
    seed: u64,
    history: Vec<EpochRecord>,
    final_err: f64,
    checkpoint: Checkpoint,
}

struct DeskRuns {
    real_data: bool,
    train_subset: Dataset,
    test: Dataset,
    norm: NormStats,
    runs: Vec<RunOut>,
}

static DESK: OnceLock<DeskRuns> = OnceLock::new();

fn desk_protocol(t: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 40,
        batch_size: 128,
        lr_milestones: vec![20, 32],
        alternation: t,
        seed,
        eval_limit: 500,
        ..TrainConfig::default()
    }
}

fn desk_runs() -> &'static DeskRuns {
    DESK.get_or_init(|| {
        let (train_full, test, real_data) = match std::env::var_os("AWM_CIFAR10_DIR") {
            Some(dir) => {
                let dir = std::path::PathBuf::from(dir);
                let train = data::load_split(&dir, data::CifarVariant::C10, true).unwrap();
                let test = data::load_split(&dir, data::CifarVariant::C10, false).unwrap();
                (train, test, true)
            }
            None => {
                let (train, test) = data::generate_synthetic_split(10, 500, 1000, 600_001);
                (train, test, false)
            }
        };
        let train_subset = data::subset(&train_full, 200, 600).unwrap();
        let norm = NormStats::compute(&train_subset);
        let bundle = DataBundle { train: &train_subset, test: &test, norm };

        let mut runs = Vec::new();
        for t in [3usize, 0] {
            for seed in [0u64, 1, 2] {
                let started = Instant::now();
                let cfg = desk_protocol(t, seed);
                let net =
                    Network::build(&NetworkConfig::new(NetworkKind::ResnetAwm, 14, 10), seed).unwrap();
                let mut trainer = Trainer::new(net, cfg.clone()).unwrap();
                let history = trainer.train(&bundle, &mut ()).unwrap();
                let final_err = awm::train::evaluate(&trainer.net, &test, &norm, 0).unwrap();
                let mut exp = ExperimentConfig::default();
                exp.network = NetworkConfig::new(NetworkKind::ResnetAwm, 14, 10);
                exp.train = cfg;
                exp.subset_per_class = 200;
                exp.subset_seed = 600;
                let checkpoint = Checkpoint::from_trainer(&trainer, &exp, &norm);
                eprintln!(
                    "desk run t={t} seed={seed}: final test err {final_err:.4} ({:.0}s)",
                    started.elapsed().as_secs_f64()
                );
                runs.push(RunOut { t, seed, history, final_err, checkpoint });
            }
        }
        DeskRuns { real_data, train_subset, test, norm, runs }
    })
}

#[test]
fn criterion_6_desk_scale_training() {
    let desk = desk_runs();
    let run = desk.runs.iter().find(|r| r.t == 3 && r.seed == 0).unwrap();
    let early: f64 =
        run.history[..5].iter().map(|r| r.train_loss).sum::<f64>() / 5.0;
    let late: f64 =
        run.history[35..].iter().map(|r| r.train_loss).sum::<f64>() / 5.0;
    let final_acc = run.history.last().unwrap().train_acc;
    let ok = run.final_err < 0.70 && final_acc > 0.60 && late < early;
    report(
        6,
        "desk-scale training",
        ok,
        &format!(
            "test err {:.4} (<0.70), train acc {:.4} (>0.60), loss {:.4}->{:.4}, {} data",
            run.final_err,
            final_acc,
            early,
            late,
            if desk.real_data { "real CIFAR-10" } else { "synthetic" }
        ),
    );
}

#[test]
fn criterion_7_t_sweep() {
    let desk = desk_runs();
    let mean = |t: usize| -> f64 {
        let errs: Vec<f64> =
            desk.runs.iter().filter(|r| r.t == t).map(|r| r.final_err).collect();
        errs.iter().sum::<f64>() / errs.len() as f64
    };
    let m3 = mean(3);
    let m0 = mean(0);
    let ok = m3 <= m0;
    report(
        7,
        "t-sweep direction",
        ok,
        &format!("mean final err over 3 seeds: t=3 {m3:.4} vs t=0 {m0:.4}"),
    );
}

#[test]
fn criterion_8_trace_discriminability() {
    let desk = desk_runs();
    let run = desk.runs.iter().find(|r| r.t == 3 && r.seed == 0).unwrap();
    let trainer = run.checkpoint.into_trainer().unwrap();

    let fit_traces =
        analytics::extract_traces(&trainer.net, &desk.train_subset, &desk.norm).unwrap();
    let eval_traces = analytics::extract_traces(&trainer.net, &desk.test, &desk.norm).unwrap();

    // non-degeneracy: per-unit λ₁ standard deviation on the test set
    let units = eval_traces[0].lambda1.len();
    let n = eval_traces.len() as f64;
    let mut lively = 0usize;
    for u in 0..units {
        let vals: Vec<f64> = eval_traces.iter().map(|t| t.lambda1[u]).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sd > 1e-3 {
            lively += 1;
        }
    }

    let (x_fit, y_fit) = analytics::trace_matrix(&fit_traces).unwrap();
    let (x_eval, y_eval) = analytics::trace_matrix(&eval_traces).unwrap();
    let p = units;
    let d = 30usize.min(9).min(p);
    let model = analytics::fit_pipeline(&x_fit, &y_fit, p, d).unwrap();
    let curve = analytics::cmc_curve(&model, &x_eval, &y_eval).unwrap();
    let rank1 = curve[0];

    let ok = lively * 2 >= units && rank1 >= 0.15;
    report(
        8,
        "trace discriminability",
        ok,
        &format!("{lively}/{units} units with sd>1e-3, PCA+LDA rank-1 {rank1:.4} (chance 0.10)"),
    );
}

// ---------------------------------------------------------------------------
// criterion 9: eigensolver equivalence
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_pca_lda_oracle_equivalence() {
    use nalgebra::DMatrix;
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    let mut worst = 0.0f64;
    for n in 2..=10usize {
        for _ in 0..10 {
            let mut a = Tensor::zeros(&[n, n]);
            for i in 0..n {
                for j in i..n {
                    let v = rng.random_range(-3.0..3.0);
                    a.set2(i, j, v);
                    a.set2(j, i, v);
                }
            }
            let (vals, vecs) = analytics::jacobi_eigh(&a).unwrap();
            let m = DMatrix::from_fn(n, n, |i, j| a.at2(i, j));
            let mut oracle: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().cloned().collect();
            oracle.sort_by(|x, y| y.partial_cmp(x).unwrap());
            for (got, want) in vals.iter().zip(&oracle) {
                worst = worst.max((got - want).abs());
            }
            // residual of each eigenpair
            for j in 0..n {
                for i in 0..n {
                    let av: f64 = (0..n).map(|k| a.at2(i, k) * vecs.at2(k, j)).sum();
                    worst = worst.max((av - vals[j] * vecs.at2(i, j)).abs());
                }
            }
        }
    }
    let ok = worst < 1e-6;
    report(9, "eigensolver oracle equivalence", ok, &format!("worst deviation {worst:.3e}"));
}

// ---------------------------------------------------------------------------
// criterion 10: DenseNet variant
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_densenet_trains() {
    let net = Network::build(&NetworkConfig::new(NetworkKind::DensenetAwm, 22, 10), 10).unwrap();
    let units = net.awm_units().len();
    let train_set = data::generate_synthetic(10, 30, 1001);
    let test_set = data::generate_synthetic(10, 5, 1002);
    let norm = NormStats::compute(&train_set);
    let bundle = DataBundle { train: &train_set, test: &test_set, norm };
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 50,
        lr_milestones: vec![],
        alternation: 0,
        seed: 10,
        eval_limit: 30,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(net, cfg).unwrap();
    let history = trainer.train(&bundle, &mut ()).unwrap();
    let first = history.first().unwrap().train_loss;
    let last = history.last().unwrap().train_loss;

    // Σλ = 1 at every dense layer in active mode
    trainer.net.set_awm_mode(AwmMode::Active);
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let probe = random_tensor(&mut rng, &[4, 3, 32, 32], 1.0);
    trainer.net.forward(&probe, false, false).unwrap();
    let mut worst_sum = 0.0f64;
    for unit in trainer.net.awm_units() {
        let lam = unit.last_lambda().expect("lambda captured").lambda;
        let paths = unit.n_paths();
        for r in 0..4 {
            let s: f64 = (0..paths).map(|c| lam.at2(r, c)).sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
        }
    }

    // gradient suite through one full dense layer: bn-relu-conv on the
    // incoming features, then weighted concat of the new path with the
    // passthrough
    let mut worst_grad = 0.0f64;
    for inst in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + inst);
        let mut unit_rng = ChaCha8Rng::seed_from_u64(6000 + inst);
        let unit = AwmUnit::new("dense.awm", &[6, 4], 4, &mut unit_rng).unwrap();
        let x = random_tensor(&mut rng, &[2, 6, 5, 5], 1.0);
        let k = random_tensor(&mut rng, &[4, 6, 3, 3], 0.4);
        let g = random_tensor(&mut rng, &[6], 0.3).map(|v| v + 1.0);
        let b = random_tensor(&mut rng, &[6], 0.3);
        let lw = random_tensor(&mut rng, &[2, 10, 5, 5], 1.0);
        let layer = |v: &[Var]| -> Var {
            let stats = ops::BnStats::new(6);
            let h = ops::relu(&ops::batch_norm(&v[0], &v[2], &v[3], &stats, true).unwrap());
            let new = ops::conv2d(&h, &v[1], 1, 1).unwrap();
            let paths = [v[0].clone(), new];
            let z = unit.embed_paths(&paths).unwrap();
            let lam = unit.infer_weights(&z).unwrap();
            weighted(&ops::weighted_merge_concat(&paths, &lam).unwrap(), &lw)
        };
        let (err, _, _) = fd_check_smooth(&[x, k, g, b], &layer);
        worst_grad = worst_grad.max(err);
        for p in unit.params() {
            p.zero_grad();
        }
    }

    let ok = units > 0 && last < first && worst_sum <= 1e-9 && worst_grad < 1e-4;
    report(
        10,
        "densenet variant",
        ok,
        &format!(
            "{units} mapping units, loss {first:.4} -> {last:.4} over 5 epochs, worst |Σλ−1| {worst_sum:.3e}, dense-layer grad err {worst_grad:.3e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 11: I/O bit-exactness and resume determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_io_bit_exactness() {
    // CIFAR byte round trip (both variants)
    let synth = data::generate_synthetic(10, 20, 1101);
    let bytes = data::serialize_cifar(&synth);
    let parsed =
        data::parse_cifar_bytes(&bytes, data::CifarVariant::C10, std::path::Path::new("a.bin"))
            .unwrap();
    let cifar_ok = data::serialize_cifar(&parsed) == bytes;

    // checkpoint round trip, bit-identical file bytes
    let net = Network::build(&NetworkConfig::new(NetworkKind::ResnetAwm, 8, 10), 11).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 32,
        lr_milestones: vec![],
        alternation: 3,
        seed: 11,
        eval_limit: 30,
        ..TrainConfig::default()
    };
    let train_set = data::generate_synthetic(10, 10, 1102);
    let test_set = data::generate_synthetic(10, 3, 1103);
    let norm = NormStats::compute(&train_set);
    let bundle = DataBundle { train: &train_set, test: &test_set, norm };

    let mut unbroken = Trainer::new(
        Network::build(&NetworkConfig::new(NetworkKind::ResnetAwm, 8, 10), 11).unwrap(),
        cfg.clone(),
    )
    .unwrap();
    let unbroken_history = unbroken.train(&bundle, &mut ()).unwrap();

    let mut part = Trainer::new(net, cfg.clone()).unwrap();
    part.run_epoch(&bundle).unwrap();
    part.run_epoch(&bundle).unwrap();
    let mut exp = ExperimentConfig::default();
    exp.network = NetworkConfig::new(NetworkKind::ResnetAwm, 8, 10);
    exp.train = cfg;
    let ck = Checkpoint::from_trainer(&part, &exp, &norm);
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    ck.save(&p1).unwrap();
    let reloaded = Checkpoint::load(&p1).unwrap();
    reloaded.save(&p2).unwrap();
    let ckpt_ok = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();

    // deterministic resume for one epoch
    let mut resumed = reloaded.into_trainer().unwrap();
    let rec = resumed.run_epoch(&bundle).unwrap();
    let want = &unbroken_history[2];
    let resume_ok = rec.train_loss.to_bits() == want.train_loss.to_bits()
        && rec.test_err.to_bits() == want.test_err.to_bits()
        && rec.train_acc.to_bits() == want.train_acc.to_bits();

    let ok = cifar_ok && ckpt_ok && resume_ok;
    report(
        11,
        "io bit-exactness",
        ok,
        &format!("cifar round trip {cifar_ok}, checkpoint bytes {ckpt_ok}, resumed epoch identical {resume_ok}"),
    );
}
