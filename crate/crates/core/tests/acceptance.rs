//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use snl_core::bench::{dense_multiplies, fit_scaling, run_bench, snl_multiplies, BenchPoint};
use snl_core::equiv::{default_tolerance, dense_equivalence};
use snl_core::gradcheck::{check_block, BlockKind, CheckDims, DEFAULT_EPS, DENSE_THRESHOLD, SPARSE_THRESHOLD};
use snl_core::nonlocal::{dense_core, nl_forward};
use snl_core::sparse::{base_grid, snl_core, snl_forward};
use snl_core::train::{poly_lr, train, ModelKind, SgdConfig, TrainConfig};
use snl_core::{
    AttentionOpts, Exec, GridSpec, MulCounter, NlParams, Precision, SamplingGrid, Scalar, Shape2D, SnlParams,
    Tensor,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

fn dense_equivalence_oracle() -> Outcome {
    let start = Instant::now();
    let opts = AttentionOpts::default();
    let mut worst_double = 0.0f64;
    let mut worst_single = 0.0f64;
    for seed in 0..5 {
        for (c, h, w) in [(8, 7, 7), (4, 5, 6), (2, 3, 3)] {
            let d = dense_equivalence::<f64>(seed, c, h, w, &opts).expect("double run");
            worst_double = worst_double.max(d.max_output_deviation);
            let s = dense_equivalence::<f32>(seed, c, h, w, &opts).expect("single run");
            worst_single = worst_single.max(s.max_output_deviation);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst_double < default_tolerance(Precision::Double)
            && worst_single < default_tolerance(Precision::Single)
            && within(elapsed, 10),
        format!("max deviation double {worst_double:.3e}, single {worst_single:.3e}, {elapsed:.2?}"),
    )
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = [0.0f64; 2];
    let mut failures = Vec::new();
    for seed in 0..5 {
        let cases = [
            (BlockKind::DenseNl, CheckDims::dense(4, 5, 5), DENSE_THRESHOLD),
            (BlockKind::Snl, CheckDims::sparse(4, 5, 5, 3, 3), SPARSE_THRESHOLD),
        ];
        for (slot, (kind, dims, threshold)) in cases.into_iter().enumerate() {
            for r in check_block(kind, seed, dims, DEFAULT_EPS, threshold).expect("gradcheck run") {
                worst[slot] = worst[slot].max(r.max_rel_error);
                if !r.passed {
                    failures.push(format!("{kind} seed {seed} {}", r.group));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && within(elapsed, 120),
        format!(
            "worst rel error dense {:.3e}, snl {:.3e}, failing groups {:?}, {elapsed:.2?}",
            worst[0], worst[1], failures
        ),
    )
}

fn count_case(h: usize, w: usize, k: usize, c: usize) -> Result<(), String> {
    let shape = Shape2D::new(h, w).unwrap();
    let n = shape.n();
    let mut rng = ChaCha8Rng::seed_from_u64((n * 31 + k) as u64);
    let q = Tensor::<f32>::randn(&[c / 2, n], 1.0, &mut rng);
    let kx = Tensor::<f32>::randn(&[c / 2, n], 1.0, &mut rng);
    let v = Tensor::<f32>::randn(&[c, n], 1.0, &mut rng);
    let window = SamplingGrid::Window(GridSpec::most_square(k).unwrap());
    let coords = base_grid::<f32>(shape, window).unwrap();
    for exec in [Exec::Sequential, Exec::Parallel] {
        let opts = AttentionOpts::with_exec(exec);
        let counter = MulCounter::new();
        snl_core(&q, &kx, &v, &coords, shape, &opts, Some(&counter)).unwrap();
        if counter.get() != snl_multiplies(n, k, c) || counter.get() != (n * k * 3 * c / 2) as u64 {
            return Err(format!("snl N={n} K={k} C={c}: counted {}", counter.get()));
        }
        let counter = MulCounter::new();
        dense_core(&q, &kx, &v, &opts, Some(&counter)).unwrap();
        if counter.get() != dense_multiplies(n, c) || counter.get() != (n * n * 3 * c / 2) as u64 {
            return Err(format!("dense N={n} C={c}: counted {}", counter.get()));
        }
    }
    Ok(())
}

fn exact_counts() -> Outcome {
    let cases = [(4, 4, 9, 4), (7, 5, 9, 8), (16, 16, 81, 64), (49, 49, 81, 64), (49, 49, 49, 16), (3, 9, 27, 2)];
    let errors: Vec<String> = cases.iter().filter_map(|&(h, w, k, c)| count_case(h, w, k, c).err()).collect();
    outcome(
        errors.is_empty(),
        format!("{} configurations incl. N=2401 K=81, mismatches {errors:?}", cases.len()),
    )
}

fn empirical_scaling() -> Outcome {
    let start = Instant::now();
    let report = run_bench(&[(16, 16), (32, 32), (64, 64), (49, 49)], 81, 64, 5, Exec::Sequential)
        .expect("bench run");
    let fit_set = |kind: BlockKind| -> Vec<BenchPoint> {
        report
            .of(kind)
            .into_iter()
            .filter(|p| p.n != 2401)
            .collect()
    };
    let snl = fit_scaling(&fit_set(BlockKind::Snl)).expect("snl fit");
    let dense = fit_scaling(&fit_set(BlockKind::DenseNl)).expect("dense fit");
    let at = |kind| report.of(kind).into_iter().find(|p| p.n == 2401).map(|p| p.median_ms);
    let snl_2401 = at(BlockKind::Snl).expect("snl point");
    let dense_2401 = at(BlockKind::DenseNl).expect("dense point");
    let elapsed = start.elapsed();
    outcome(
        (0.7..=1.3).contains(&snl)
            && (1.7..=2.3).contains(&dense)
            && snl_2401 < dense_2401
            && within(elapsed, 300),
        format!(
            "slope snl {snl:.3}, dense {dense:.3}; N=2401 snl {snl_2401:.2} ms vs dense {dense_2401:.2} ms, {elapsed:.2?}"
        ),
    )
}

fn residual_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for i in 0..100usize {
        let c = 2 + 2 * (i % 4);
        let (h, w) = (3 + i % 6, 3 + i % 5);
        let x = Tensor::<f64>::randn(&[c, h, w], 2.0, &mut rng);
        let mut dense = NlParams::random(c, 0.7, &mut rng).unwrap();
        dense.w_gamma = Tensor::zeros(dense.w_gamma.dims());
        dense.b_gamma = Tensor::zeros(dense.b_gamma.dims());
        let (z, _) = nl_forward(&x, &dense).unwrap();
        if z.data() != x.data() {
            mismatches += 1;
        }
        let grid = GridSpec::new(1 + i % 3, 1 + (i / 3) % 3).unwrap();
        let mut sparse = SnlParams::random(c, grid.k(), 0.7, &mut rng).unwrap();
        sparse.w_offset = Tensor::randn(sparse.w_offset.dims(), 0.3, &mut rng);
        sparse.attn.w_gamma = Tensor::zeros(sparse.attn.w_gamma.dims());
        sparse.attn.b_gamma = Tensor::zeros(sparse.attn.b_gamma.dims());
        let (z, _) = snl_forward(&x, &sparse, SamplingGrid::Window(grid)).unwrap();
        if z.data() != x.data() {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("100 inputs per block, {mismatches} not bit-identical"))
}

fn worst_row_error<T: Scalar>(affinity: &Tensor<T>) -> f64 {
    let rows = affinity.dim(0);
    (0..rows)
        .map(|r| {
            let s: f64 = affinity.row(r).iter().map(|v| v.as_f64()).sum();
            (s - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

fn fleet<T: Scalar>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..40usize {
        let c = 2 + 2 * (i % 5);
        let (h, w) = (3 + i % 7, 3 + (i * 7) % 6);
        let scale = [0.1, 1.0, 5.0, 30.0][i % 4];
        let x = Tensor::<T>::randn(&[c, h, w], scale, &mut rng);
        let dense = NlParams::random(c, 0.5, &mut rng).unwrap();
        let (_, acts) = nl_forward(&x, &dense).unwrap();
        worst = worst.max(worst_row_error(&acts.affinity));
        for grid in [
            SamplingGrid::Window(GridSpec::new(3, 3).unwrap()),
            SamplingGrid::Window(GridSpec::new(1 + i % 4, 2).unwrap()),
            SamplingGrid::Full,
        ] {
            let mut sparse = SnlParams::random(c, grid.k(Shape2D::new(h, w).unwrap()), 0.5, &mut rng).unwrap();
            sparse.w_offset = Tensor::randn(sparse.w_offset.dims(), 1.5, &mut rng);
            let (_, acts) = snl_forward(&x, &sparse, grid).unwrap();
            worst = worst.max(worst_row_error(&acts.affinity));
        }
    }
    worst
}

fn row_stochastic() -> Outcome {
    let single = fleet::<f32>(11);
    let double = fleet::<f64>(12);
    outcome(
        single < 1e-6 && double < 1e-12,
        format!("worst row-sum error single {single:.3e}, double {double:.3e}"),
    )
}

fn poly_schedule() -> Outcome {
    let cfg = SgdConfig::default();
    let mut worst = 0.0f64;
    for i in 0..100 {
        let iter = i * cfg.max_iter / 99;
        let want = cfg.base_lr * (1.0 - iter as f64 / cfg.max_iter as f64).powf(0.9);
        worst = worst.max((poly_lr(iter, &cfg).unwrap() - want).abs());
    }
    let first = poly_lr(0, &cfg).unwrap();
    outcome(
        worst < 1e-12 && first == 0.005,
        format!("max deviation {worst:.3e} over 100 points, poly_lr(0) = {first}"),
    )
}

fn learning_demonstration() -> Outcome {
    let start = Instant::now();
    let snl_cfg = TrainConfig::default();
    let local_cfg = TrainConfig {
        model: ModelKind::Local,
        ..snl_cfg
    };
    let snl = train(snl_cfg).expect("snl run");
    let local = train(local_cfg).expect("local run");
    let elapsed = start.elapsed();
    let margin = 100.0 * (snl.last.accuracy - local.last.accuracy);
    let same_budget = snl.model.block_param_count().abs_diff(local.model.block_param_count());
    outcome(
        margin > 10.0
            && snl.initial.mean_abs_offset == 0.0
            && snl.last.mean_abs_offset > 0.5
            && within(elapsed, 900),
        format!(
            "accuracy snl {:.3} vs local {:.3} ({margin:+.1} points), block params {} vs {} (diff {same_budget}), mean |offset| {} -> {:.3} px, {elapsed:.2?}",
            snl.last.accuracy,
            local.last.accuracy,
            snl.model.block_param_count(),
            local.model.block_param_count(),
            snl.initial.mean_abs_offset,
            snl.last.mean_abs_offset,
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("dense equivalence", dense_equivalence_oracle),
        ("gradient correctness", gradient_correctness),
        ("exact multiply counts", exact_counts),
        ("empirical scaling", empirical_scaling),
        ("residual identity", residual_identity),
        ("row stochasticity", row_stochastic),
        ("poly schedule", poly_schedule),
        ("learning demonstration", learning_demonstration),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let r = run();
        println!("criterion {id} {name}: {} ({})", if r.passed { "PASS" } else { "FAIL" }, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
