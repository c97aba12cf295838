//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see details; the harness's
//! per-test ok/FAILED line mirrors it either way).
//!
//! Criteria 5-7 share one desk-scale experiment: a teacher zoo at widths
//! {1, 2, 4} over five seeds and a (lambda policy x tau x width x seed)
//! sweep of 2-bit students, all on the synthetic cluster task.

mod common;

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use quantkd::config::{
    DatasetConfig, LrSchedule, ModelConfig, OptimConfig, RunConfig, SweepConfig,
};
use quantkd::data::{load_cifar10_bin, load_idx, write_idx, DataPair, Dataset, Split};
use quantkd::distill::{
    kd_loss, soft_label_stats, DistillConfig, LambdaSpec, Teacher, TeacherMode,
};
use quantkd::harness::report::aggregate;
use quantkd::harness::{
    cache_teacher_logits, ensure_hard_checkpoint, full_logits, sweep, train_student_kd,
    train_teacher, ResultsStore, RunStatus, StudentDistill, StudentRun, SweepOptions,
    TeacherSource,
};
use quantkd::models::{
    build, load_checkpoint, save_checkpoint, CheckpointMeta, Family, ModelSpec,
};
use quantkd::quantizer::{
    binarize, compute_delta_l2, l2_search_bracket, quantize_b, DeltaPolicy, QuantizerSpec,
};
use quantkd::rng::Rng;
use quantkd::tensor::{bits_eq, Tape, Tensor};

// ---- criterion 1: quantizer vs brute-force nearest-level oracle ----

/// Independent oracle: enumerate every level `k * delta`, pick the nearest,
/// break ties toward larger magnitude.
fn nearest_level_oracle(w: f64, bits: u32, delta: f64) -> f64 {
    let half = if bits == 1 { 1 } else { ((1i64 << bits) - 2) / 2 };
    let lo = if bits == 1 { -1 } else { -half };
    let mut best = f64::INFINITY;
    let mut best_level = 0.0f64;
    for k in lo..=half {
        if bits == 1 && k == 0 {
            continue;
        }
        let level = k as f64 * delta;
        let d = (w - level).abs();
        if d < best || (d == best && level.abs() > best_level.abs()) {
            best = d;
            best_level = level;
        }
    }
    // The implementation's sign convention resolves the symmetric tie at
    // w == 0 toward sign(0) = +1 for the 1-bit case.
    if bits == 1 && w == 0.0 {
        return delta;
    }
    best_level
}

#[test]
fn criterion_1_quantizer_matches_nearest_level_oracle() {
    let started = Instant::now();
    let mut rng = Rng::new(0xc1);
    for bits in [1u32, 2, 3, 4, 8] {
        for i in 0..10_000 {
            let w: f64 = rng.uniform(-3.0, 3.0);
            let delta: f64 = rng.uniform(0.02, 1.0);
            let got = quantize_b(&Tensor::scalar(w), bits, delta).unwrap().item();
            let want = nearest_level_oracle(w, bits, delta);
            assert_eq!(
                got.to_bits(),
                want.to_bits(),
                "bits {bits} case {i}: w={w} delta={delta}: got {got}, oracle {want}"
            );
        }
    }
    // Idempotence, symmetry, boundedness, level count on random tensors.
    for case in 0..1000 {
        let bits = [1u32, 2, 3, 4, 8][case % 5];
        let n = 16 + rng.below(64);
        let w = Tensor::<f64>::rand_normal(&[n], &mut rng);
        let delta: f64 = rng.uniform(0.05, 1.0);
        let q = quantize_b(&w, bits, delta).unwrap();
        let qq = quantize_b(&q, bits, delta).unwrap();
        assert!(bits_eq(&q, &qq), "idempotence failed (bits {bits})");
        let neg = quantize_b(&w.map(|v| -v), bits, delta).unwrap();
        for (i, (&a, &b)) in neg.data().iter().zip(q.data()).enumerate() {
            if w.data()[i] != 0.0 {
                assert_eq!(a, -b, "symmetry failed at {i} (bits {bits})");
            }
        }
        let half = if bits == 1 { 1.0 } else { (((1u64 << bits) - 2) / 2) as f64 };
        let bound = delta * half + 1e-12;
        assert!(q.data().iter().all(|v| v.abs() <= bound), "boundedness failed");
        let mut distinct: Vec<u64> = q.data().iter().map(|v| v.to_bits()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        let max_levels = if bits == 1 { 2 } else { (1usize << bits) - 1 };
        assert!(distinct.len() <= max_levels, "level count {} > {max_levels}", distinct.len());
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 10.0, "criterion 1 took {secs:.1}s (budget 10s)");
    println!("criterion 1 PASS ({secs:.2}s): quantizer matches brute-force oracle exactly");
}

// ---- criterion 2: step-size optimality ----

/// Independent residual oracle (re-derives the quantizer from the formula).
fn residual_oracle(w: &[f64], bits: u32, delta: f64) -> f64 {
    let half = if bits == 1 { 0.0 } else { (((1u64 << bits) - 2) / 2) as f64 };
    let mut acc = 0.0;
    for &v in w {
        let q = if bits == 1 {
            if v < 0.0 {
                -delta
            } else {
                delta
            }
        } else {
            let k = ((v.abs() / delta + 0.5).floor()).min(half);
            k * delta * if v < 0.0 { -1.0 } else { 1.0 }
        };
        acc += (v - q) * (v - q);
    }
    acc
}

#[test]
fn criterion_2_l2_delta_beats_thousand_point_grid() {
    let started = Instant::now();
    let mut rng = Rng::new(0xc2);
    for bits in [1u32, 2, 4] {
        for case in 0..100 {
            let w = Tensor::<f64>::rand_normal(&[512], &mut rng).map(|v| v * 0.8);
            let delta: f64 = compute_delta_l2(&w, bits).unwrap();
            let mine = residual_oracle(w.data(), bits, delta);
            let (lo, hi) = l2_search_bracket(&w, bits).unwrap();
            let mut grid_best = f64::INFINITY;
            for i in 0..1000 {
                let d = lo + (hi - lo) * i as f64 / 999.0;
                grid_best = grid_best.min(residual_oracle(w.data(), bits, d));
            }
            assert!(
                mine <= grid_best + 1e-12,
                "bits {bits} case {case}: residual {mine} > grid best {grid_best}"
            );
            if bits == 1 {
                let mean_abs = w.data().iter().map(|v| v.abs()).sum::<f64>() / 512.0;
                let rel = (delta - mean_abs).abs() / mean_abs;
                assert!(rel < 1e-3, "case {case}: delta {delta} vs mean|w| {mean_abs}");
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 30.0, "criterion 2 took {secs:.1}s (budget 30s)");
    println!("criterion 2 PASS ({secs:.2}s): L2 step size optimal against 1000-point scans");
}

// ---- criterion 3: gradient correctness ----

#[test]
fn criterion_3_finite_difference_gradients() {
    let started = Instant::now();
    let mut rng = Rng::new(0xc3);
    let mut worst_overall = (String::new(), 0.0f64);
    for (name, check) in common::all_gradient_checks() {
        for _ in 0..4 {
            let err = check(&mut rng);
            assert!(err < common::GRAD_TOL, "{name}: max rel err {err:.3e}");
            if err > worst_overall.1 {
                worst_overall = (name.to_string(), err);
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "criterion 3 took {secs:.1}s (budget 60s)");
    println!(
        "criterion 3 PASS ({secs:.2}s): all ops within 1e-4 of central differences (worst {} at {:.2e})",
        worst_overall.0, worst_overall.1
    );
}

// ---- criterion 4: distillation identities ----

fn small_pair_f64() -> DataPair<f64> {
    let spec = quantkd::data::SynthSpec {
        classes: 10,
        train_per_class: 16,
        test_per_class: 10,
        image_side: 8,
        separation: 2.6,
        gen_seed: 33,
    };
    let (pair, _) = quantkd::data::synth_clusters::<f64>(&spec).unwrap();
    let norm = quantkd::data::Normalizer::fit(&pair.train);
    DataPair { train: norm.apply(&pair.train), test: norm.apply(&pair.test) }
}

#[test]
fn criterion_4_distillation_identities() {
    let started = Instant::now();
    // (a) constant-zero lambda is bitwise hard-label training for 100 steps.
    let data = small_pair_f64();
    let spec = ModelSpec {
        family: Family::Mlp,
        width_factor: 1.0,
        depth: 2,
        num_classes: 10,
        input_shape: data.train.input_shape(),
        residual: false,
    };
    let optim = OptimConfig {
        epochs: 10,
        batch_size: 16, // 160 train rows -> 10 steps/epoch -> 100 steps
        lr: 0.03,
        momentum: 0.9,
        weight_decay: 1e-4,
        lr_schedule: LrSchedule::Cosine,
    };
    let dir = std::env::temp_dir().join(format!("quantkd-crit4-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let pre = OptimConfig { epochs: 2, ..optim.clone() };
    let (pre_model, pre_out) = train_teacher::<f64>(&spec, &data, &pre, 3, false).unwrap();
    let meta = CheckpointMeta {
        spec: spec.clone(),
        seed: 3,
        epochs: 2,
        final_train_acc: pre_out.final_train_acc,
        final_test_acc: pre_out.final_test_acc,
    };
    let init_path = dir.join("init.ckpt");
    save_checkpoint(&pre_model, &meta, &init_path).unwrap();
    let init = load_checkpoint(&init_path).unwrap();
    let (teacher_model, _) = train_teacher::<f64>(&spec, &data, &pre, 9, false).unwrap();
    let teacher_logits = Arc::new(full_logits(&teacher_model, &data.train).unwrap());
    let quant = QuantizerSpec::new(2, DeltaPolicy::StdDev);
    let (hard_model, hard_out) = train_student_kd(StudentRun {
        spec: &spec,
        data: &data,
        optim: &optim,
        seed: 5,
        quantizer: Some(&quant),
        distill: None,
        init: &init,
        augment: false,
    })
    .unwrap();
    let (kd_model, kd_out) = train_student_kd(StudentRun {
        spec: &spec,
        data: &data,
        optim: &optim,
        seed: 5,
        quantizer: Some(&quant),
        distill: Some(StudentDistill {
            config: DistillConfig {
                tau: 5.0,
                lambda: LambdaSpec::Constant { value: 0.0 },
                tau_squared_scaling: false,
            },
            teacher: TeacherSource::Cached(teacher_logits),
        }),
        init: &init,
        augment: false,
    })
    .unwrap();
    assert!(matches!(hard_out.status, RunStatus::Completed));
    for (a, b) in hard_model.params().iter().zip(kd_model.params()) {
        assert!(bits_eq(&a.tensor, &b.tensor), "{} diverged from hard path", a.name);
    }
    for (e1, e2) in hard_out.epochs.iter().zip(&kd_out.epochs) {
        assert_eq!(e1.train_loss.to_bits(), e2.train_loss.to_bits(), "loss path differs");
    }

    // (b) kd_loss is affine in lambda within 1e-10 at 64-bit.
    let mut rng = Rng::new(0xc4);
    for case in 0..50 {
        let n = 1 + rng.below(4);
        let c = 2 + rng.below(8);
        let s = Tensor::<f64>::rand_normal(&[n, c], &mut rng).map(|v| v * 2.0);
        let t = Tensor::<f64>::rand_normal(&[n, c], &mut rng).map(|v| v * 2.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let tau = [1.0, 2.0, 5.0, 10.0][rng.below(4)];
        let eval = |lambda: f64| {
            let mut tape = Tape::new();
            let sv = tape.constant(s.clone());
            let tv = tape.constant(t.clone());
            let l = kd_loss(&mut tape, sv, tv, &labels, tau, lambda, false).unwrap();
            tape.value(l).item()
        };
        let l0 = eval(0.0);
        let l1 = eval(1.0);
        for lambda in [0.2, 0.5, 0.77] {
            let l = eval(lambda);
            let affine = (1.0 - lambda) * l0 + lambda * l1;
            assert!(
                (l - affine).abs() < 1e-10,
                "case {case}: |{l} - {affine}| = {:.2e}",
                (l - affine).abs()
            );
        }
    }

    // (c) teacher logits are gradient-blocked.
    let s = Tensor::<f64>::rand_normal(&[3, 6], &mut rng);
    let t = Tensor::<f64>::rand_normal(&[3, 6], &mut rng);
    let mut tape = Tape::new();
    let sv = tape.leaf(s, true);
    let tv = tape.leaf(t, true);
    let loss = kd_loss(&mut tape, sv, tv, &[0, 3, 5], 4.0, 0.6, false).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(sv).is_some());
    assert!(tape.grad(tv).is_none(), "teacher gradient leaked");

    std::fs::remove_dir_all(&dir).ok();
    let secs = started.elapsed().as_secs_f64();
    println!("criterion 4 PASS ({secs:.2}s): lambda-zero bitwise, affinity <= 1e-10, teacher blocked");
}

// ---- shared experiment for criteria 5-7 ----

struct Experiment {
    zoo_secs: f64,
    sweep_secs: f64,
    /// `teacher_entropy[seed][width_idx] = (H at tau=1, H at tau=10)`.
    teacher_entropy: Vec<Vec<(f64, f64)>>,
    hd_mean: f64,
    /// `(tau, width, mean accuracy)` per constant-lambda cell.
    constant_cells: Vec<(f64, f64, f64)>,
    gslr_cells: Vec<(f64, f64, f64)>,
    store_dir: PathBuf,
}

const WIDTHS: [f64; 3] = [1.0, 2.0, 4.0];
const TAUS: [f64; 4] = [1.0, 2.0, 5.0, 10.0];
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn experiment_dataset_config() -> DatasetConfig {
    DatasetConfig::Synth {
        classes: 10,
        train_per_class: 100,
        test_per_class: 100,
        image_side: 8,
        separation: 2.6,
        gen_seed: 7777,
        normalize: true,
    }
}

fn teacher_run_config() -> RunConfig {
    RunConfig {
        seeds: SEEDS.to_vec(),
        dataset: experiment_dataset_config(),
        model: ModelConfig {
            family: Family::Mlp,
            width_factor: 1.0,
            depth: Some(2),
            residual: false,
        },
        quantizer: None,
        distill: None,
        teacher: None,
        init: None,
        optim: OptimConfig {
            epochs: 60,
            batch_size: 64,
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::Cosine,
        },
        sweep: None,
    }
}

fn experiment() -> &'static Experiment {
    static CELL: OnceLock<Experiment> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir =
            std::env::temp_dir().join(format!("quantkd-acceptance-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let zoo = dir.join("zoo");
        let store_dir = dir.join("store");
        let teacher_cfg = teacher_run_config();
        let data: Arc<DataPair<f32>> =
            Arc::new(teacher_cfg.dataset.load(std::path::Path::new(".")).unwrap());

        // Teacher zoo (width 1 doubles as the pretrained student).
        let zoo_started = Instant::now();
        let mut store = ResultsStore::open(&store_dir).unwrap();
        let mut teacher_entropy = Vec::new();
        for &seed in &SEEDS {
            let mut per_width = Vec::new();
            for &width in &WIDTHS {
                let path = ensure_hard_checkpoint(
                    &teacher_cfg,
                    &data,
                    width,
                    seed,
                    &zoo,
                    Some(&mut store),
                    false,
                )
                .unwrap();
                let ckpt = load_checkpoint(&path).unwrap();
                let teacher: Teacher<f32> =
                    Teacher::from_checkpoint(&ckpt, TeacherMode::Float).unwrap();
                let logits = cache_teacher_logits(&teacher, &data.train).unwrap();
                let h1 = soft_label_stats(&logits, 1.0).unwrap().mean_entropy;
                let h10 = soft_label_stats(&logits, 10.0).unwrap().mean_entropy;
                per_width.push((h1, h10));
            }
            teacher_entropy.push(per_width);
        }
        let zoo_secs = zoo_started.elapsed().as_secs_f64();

        // Student sweep: 2-bit, lambda 0.5 constant vs GSLR.
        let mut student_cfg = teacher_cfg.clone();
        student_cfg.quantizer = Some(QuantizerSpec::new(2, DeltaPolicy::StdDev));
        student_cfg.optim.epochs = 20;
        student_cfg.sweep = Some(SweepConfig {
            tau: TAUS.to_vec(),
            width_factor: WIDTHS.to_vec(),
            lambda: vec![
                LambdaSpec::Constant { value: 0.5 },
                LambdaSpec::Gslr { lambda0: 0.5 },
            ],
            zoo_dir: zoo.clone(),
            pretrained_dir: zoo.clone(),
            include_hd_baseline: true,
        });
        let sweep_started = Instant::now();
        let opts = SweepOptions { workers: 4, force: false, max_cells: None };
        let outcome = sweep(&student_cfg, &data, &mut store, &opts).unwrap();
        assert_eq!(outcome.failed, 0, "sweep cells failed");
        let sweep_secs = sweep_started.elapsed().as_secs_f64();

        let aggs = aggregate(&store);
        let hd_mean = aggs
            .iter()
            .find(|a| a.kind == "hd")
            .expect("hd baseline present")
            .mean_test_acc;
        let cells = |prefix: &str| -> Vec<(f64, f64, f64)> {
            aggs.iter()
                .filter(|a| {
                    a.kind == "student"
                        && a.policy.as_deref().is_some_and(|p| p.starts_with(prefix))
                })
                .map(|a| (a.tau.unwrap(), a.width.unwrap(), a.mean_test_acc))
                .collect()
        };
        let constant_cells = cells("constant");
        let gslr_cells = cells("gslr");
        assert_eq!(constant_cells.len(), TAUS.len() * WIDTHS.len());
        assert_eq!(gslr_cells.len(), TAUS.len() * WIDTHS.len());
        Experiment {
            zoo_secs,
            sweep_secs,
            teacher_entropy,
            hd_mean,
            constant_cells,
            gslr_cells,
            store_dir,
        }
    })
}

#[test]
fn criterion_5_soft_label_phenomenology() {
    let exp = experiment();
    let mut monotone_seeds = 0;
    for (si, per_width) in exp.teacher_entropy.iter().enumerate() {
        let h1: Vec<f64> = per_width.iter().map(|e| e.0).collect();
        if h1[0] > h1[1] && h1[1] > h1[2] {
            monotone_seeds += 1;
        }
        for (wi, &(h1, h10)) in per_width.iter().enumerate() {
            assert!(
                h10 > h1,
                "seed {} width {}: H(10)={h10} <= H(1)={h1}",
                SEEDS[si],
                WIDTHS[wi]
            );
        }
    }
    assert!(
        monotone_seeds >= 4,
        "entropy at tau=1 strictly decreasing in width for only {monotone_seeds}/5 seeds"
    );
    assert!(
        exp.zoo_secs < 1800.0,
        "teacher zoo took {:.0}s (budget 1800s)",
        exp.zoo_secs
    );
    println!(
        "criterion 5 PASS ({:.1}s zoo): entropy decreasing in width for {monotone_seeds}/5 seeds, \
         tau=10 above tau=1 for all 15 teachers",
        exp.zoo_secs
    );
}

#[test]
fn criterion_6_distillation_beats_hard_baseline() {
    let exp = experiment();
    let (best_tau, best_width, best_acc) = exp
        .constant_cells
        .iter()
        .copied()
        .max_by(|a, b| a.2.partial_cmp(&b.2).unwrap())
        .unwrap();
    assert!(
        best_acc >= exp.hd_mean,
        "best constant cell {best_acc:.4} below hard baseline {:.4}",
        exp.hd_mean
    );
    assert!(
        best_acc >= exp.hd_mean + 0.003,
        "best constant cell {best_acc:.4} within 0.3 points of hard baseline {:.4}",
        exp.hd_mean
    );
    let total = exp.zoo_secs + exp.sweep_secs;
    assert!(total < 7200.0, "experiment took {total:.0}s (budget 7200s)");
    println!(
        "criterion 6 PASS ({:.1}s sweep): best cell tau={best_tau} width={best_width} mean \
         {best_acc:.4} vs hard baseline {:.4} (+{:.2} points)",
        exp.sweep_secs,
        exp.hd_mean,
        (best_acc - exp.hd_mean) * 100.0
    );
}

#[test]
fn criterion_7_gslr_robustness() {
    let exp = experiment();
    let worst = |cells: &[(f64, f64, f64)]| {
        cells.iter().copied().min_by(|a, b| a.2.partial_cmp(&b.2).unwrap()).unwrap()
    };
    let (ct, cw, worst_const) = worst(&exp.constant_cells);
    let (gt, gw, worst_gslr) = worst(&exp.gslr_cells);
    assert!(
        worst_gslr >= worst_const,
        "worst GSLR cell {worst_gslr:.4} below worst constant cell {worst_const:.4}"
    );
    assert!(
        worst_gslr >= exp.hd_mean - 0.01,
        "worst GSLR cell {worst_gslr:.4} more than 1 point below hard baseline {:.4}",
        exp.hd_mean
    );
    println!(
        "criterion 7 PASS: worst GSLR cell (tau={gt}, w={gw}) {worst_gslr:.4} vs worst constant \
         cell (tau={ct}, w={cw}) {worst_const:.4}, hard baseline {:.4}",
        exp.hd_mean
    );
}

// ---- criterion 8: determinism and resume ----

#[test]
fn criterion_8_determinism_and_resume() {
    let started = Instant::now();
    let exp = experiment(); // reuse the zoo checkpoints
    let dir = std::env::temp_dir()
        .join(format!("quantkd-crit8-{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    let zoo = exp.store_dir.parent().unwrap().join("zoo");

    let mut cfg = teacher_run_config();
    cfg.quantizer = Some(QuantizerSpec::new(2, DeltaPolicy::StdDev));
    cfg.optim.epochs = 2;
    cfg.sweep = Some(SweepConfig {
        tau: vec![1.0, 2.0, 5.0],
        width_factor: WIDTHS.to_vec(),
        lambda: vec![LambdaSpec::Constant { value: 0.5 }],
        zoo_dir: zoo.clone(),
        pretrained_dir: zoo,
        include_hd_baseline: false,
    });
    let data: Arc<DataPair<f32>> =
        Arc::new(cfg.dataset.load(std::path::Path::new(".")).unwrap());

    // 45 cells: 3 tau x 3 widths x 5 seeds, interrupted twice.
    let store_dir = dir.join("store");
    {
        let mut store = ResultsStore::open(&store_dir).unwrap();
        let first = sweep(
            &cfg,
            &data,
            &mut store,
            &SweepOptions { workers: 3, force: false, max_cells: Some(17) },
        )
        .unwrap();
        assert_eq!((first.planned, first.executed), (45, 17));
    }
    {
        let mut store = ResultsStore::open(&store_dir).unwrap();
        let second = sweep(
            &cfg,
            &data,
            &mut store,
            &SweepOptions { workers: 3, force: false, max_cells: Some(17) },
        )
        .unwrap();
        assert_eq!((second.skipped, second.executed), (17, 17));
    }
    let mut store = ResultsStore::open(&store_dir).unwrap();
    let third = sweep(&cfg, &data, &mut store, &SweepOptions::default()).unwrap();
    assert_eq!((third.skipped, third.executed), (34, 11));
    assert_eq!(store.latest().len(), 45, "resume must neither duplicate nor drop cells");

    // Identical (config, seed) rerun reproduces the record exactly
    // (wall time aside).
    let target = store.latest()[7].clone();
    let rerun = sweep(
        &cfg,
        &data,
        &mut store,
        &SweepOptions { workers: 1, force: true, max_cells: None },
    )
    .unwrap();
    assert_eq!(rerun.executed, 45);
    let after = store.get(&target.config_hash, target.seed).unwrap();
    assert!(
        target.same_outcome(after),
        "rerun of ({}, seed {}) changed outcome:\nbefore: {target:?}\nafter:  {after:?}",
        target.config_hash,
        target.seed
    );
    assert_eq!(store.latest().len(), 45);

    std::fs::remove_dir_all(&dir).ok();
    let secs = started.elapsed().as_secs_f64();
    println!(
        "criterion 8 PASS ({secs:.1}s): interrupted 45-cell sweep resumed to exactly 45 records, \
         forced rerun bitwise-identical"
    );
}

// ---- criterion 9: format fidelity ----

#[test]
fn criterion_9_format_fidelity() {
    let started = Instant::now();
    let dir = std::env::temp_dir().join(format!("quantkd-crit9-{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();

    // IDX: handcrafted fixture loads, round-trips, and malformed inputs fail.
    let mut img = Vec::new();
    img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    img.extend_from_slice(&2u32.to_be_bytes());
    img.extend_from_slice(&2u32.to_be_bytes());
    img.extend_from_slice(&2u32.to_be_bytes());
    img.extend_from_slice(&[0, 128, 255, 64, 255, 0, 32, 16]);
    let mut lbl = Vec::new();
    lbl.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    lbl.extend_from_slice(&2u32.to_be_bytes());
    lbl.extend_from_slice(&[3, 9]);
    let ip = dir.join("img");
    let lp = dir.join("lbl");
    std::fs::write(&ip, &img).unwrap();
    std::fs::write(&lp, &lbl).unwrap();
    let ds: Dataset<f32> = load_idx(&ip, &lp, Split::Train).unwrap();
    assert_eq!(ds.images.shape(), &[2, 1, 2, 2]);
    assert_eq!(ds.labels, vec![3, 9]);
    assert_eq!(ds.images.data()[0], 0.0);
    assert_eq!(ds.images.data()[2], 1.0);
    let ip2 = dir.join("img2");
    let lp2 = dir.join("lbl2");
    write_idx(&ds, &ip2, &lp2).unwrap();
    assert_eq!(std::fs::read(&ip).unwrap(), std::fs::read(&ip2).unwrap());
    assert_eq!(std::fs::read(&lp).unwrap(), std::fs::read(&lp2).unwrap());
    // Malformed: bad magic, truncation, label-count mismatch.
    let mut bad_magic = img.clone();
    bad_magic[2] = 0xff;
    std::fs::write(dir.join("badmagic"), &bad_magic).unwrap();
    assert!(load_idx::<f32>(&dir.join("badmagic"), &lp, Split::Train).is_err());
    std::fs::write(dir.join("short"), &img[..img.len() - 2]).unwrap();
    assert!(load_idx::<f32>(&dir.join("short"), &lp, Split::Train).is_err());
    let mut lbl3 = lbl.clone();
    lbl3[7] = 3;
    lbl3.push(1);
    std::fs::write(dir.join("lbl3"), &lbl3).unwrap();
    assert!(load_idx::<f32>(&ip, &dir.join("lbl3"), Split::Train).is_err());

    // CIFAR: single-record fixture, wrong-size file, missing file named.
    let cdir = dir.join("cifar");
    std::fs::create_dir_all(&cdir).unwrap();
    let mut rec = vec![7u8];
    rec.extend(std::iter::repeat_n(200u8, 3072));
    std::fs::write(cdir.join("test_batch.bin"), &rec).unwrap();
    let cds: Dataset<f32> = load_cifar10_bin(&cdir, Split::Test).unwrap();
    assert_eq!(cds.images.shape(), &[1, 3, 32, 32]);
    assert_eq!(cds.labels, vec![7]);
    assert!((cds.images.data()[0] - 200.0 / 255.0).abs() < 1e-7);
    std::fs::write(cdir.join("test_batch.bin"), vec![0u8; 500]).unwrap();
    assert!(load_cifar10_bin::<f32>(&cdir, Split::Test).is_err());
    let err = load_cifar10_bin::<f32>(&cdir, Split::Train).unwrap_err();
    assert!(err.to_string().contains("data_batch_1.bin"), "{err}");

    // Checkpoints: bit-exact round trip, checksum rejection, truncation.
    let spec = ModelSpec {
        family: Family::SmallConv,
        width_factor: 1.5,
        depth: 3,
        num_classes: 10,
        input_shape: [1, 8, 8],
        residual: false,
    };
    let model = build::<f32>(&spec, 42).unwrap();
    let meta = CheckpointMeta {
        spec: spec.clone(),
        seed: 42,
        epochs: 0,
        final_train_acc: 0.0,
        final_test_acc: 0.0,
    };
    let cpath = dir.join("model.ckpt");
    save_checkpoint(&model, &meta, &cpath).unwrap();
    let ckpt = load_checkpoint(&cpath).unwrap();
    let restored = ckpt.instantiate::<f32>().unwrap();
    for (a, b) in model.params().iter().zip(restored.params()) {
        assert!(bits_eq(&a.tensor, &b.tensor), "{} not bit-exact", a.name);
    }
    assert_eq!(ckpt.trainable_elements(), spec.param_count());
    let mut corrupt = std::fs::read(&cpath).unwrap();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x01;
    std::fs::write(dir.join("corrupt.ckpt"), &corrupt).unwrap();
    assert!(matches!(
        load_checkpoint(&dir.join("corrupt.ckpt")),
        Err(quantkd::Error::Integrity(_))
    ));
    let full = std::fs::read(&cpath).unwrap();
    std::fs::write(dir.join("trunc.ckpt"), &full[..full.len() / 3]).unwrap();
    assert!(load_checkpoint(&dir.join("trunc.ckpt")).is_err());

    // A 1-bit quantizer on a binarize path stays total.
    let w = Tensor::from_vec(vec![0.0f32, -0.5, 0.5]);
    assert_eq!(binarize(&w, 0.25).unwrap().data(), &[0.25, -0.25, 0.25]);

    std::fs::remove_dir_all(&dir).ok();
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 5.0, "criterion 9 took {secs:.1}s (budget 5s)");
    println!("criterion 9 PASS ({secs:.2}s): IDX, CIFAR, and checkpoint formats bit-faithful");
}
