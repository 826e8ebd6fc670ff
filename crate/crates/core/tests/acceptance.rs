//! Acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so the report reads top to bottom.
//! Pass criterion numbers as arguments to run a subset, for example
//! `cargo test --test acceptance -- 1 2 7`.

use std::process::ExitCode;
use std::time::Instant;

use awjm::adjoint::{fd_check, gradient, step_jvp, step_vjp, Component};
use awjm::cost::{Controls, CostSpec};
use awjm::data_gen::{generate_clean, Combine, EtchShape, MeasurementSet};
use awjm::experiments::{identify, relative_l2, run_lcurve, run_sensitivity, spearman, Problem};
use awjm::model::{forward, EtchRate, Grid1D, ModelParams, TimeScheme};
use awjm::presets::{preset, CostVariant};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = (bool, String);

/// Relative central-difference step, about the cube root of machine epsilon.
const FD_STEP: f64 = 1e-5;

fn random_instance(
    rng: &mut ChaCha8Rng,
) -> (ModelParams, MeasurementSet, CostSpec, Grid1D, TimeScheme) {
    let n = rng.random_range(8..=30);
    let g = Grid1D::symmetric(1.0, n).unwrap();
    let steps = rng.random_range(20..=200);
    let dt = (g.dx() * g.dx() / 4.0 * rng.random_range(0.5..1.0)).min(0.3 / steps as f64);
    let s = TimeScheme::new(dt * steps as f64, steps).unwrap();
    let (c, sigma, floor) = (
        rng.random_range(0.05..0.5),
        rng.random_range(0.2..0.6),
        rng.random_range(0.0..0.05),
    );
    let e = EtchRate::from_fn(&g, |x| floor + c * (-(x * x) / (sigma * sigma)).exp()).unwrap();
    let p = ModelParams::new(rng.random_range(0.5..2.5), rng.random_range(0.5..4.0), e).unwrap();
    let z = generate_clean(&p, &g, &s).unwrap();
    let variant = CostVariant::ALL[rng.random_range(0..5)];
    let profiles = (0..variant.count())
        .map(|_| {
            let scale = rng.random_range(0.7..1.3);
            let mut d: Vec<f64> = z
                .iter()
                .map(|v| scale * v + 0.01 * rng.random_range(-1.0..1.0))
                .collect();
            d[0] = 0.0;
            d[n - 1] = 0.0;
            d
        })
        .collect();
    let meas = MeasurementSet::new(g, profiles, variant.combine()).unwrap();
    let mask = rng.random_range(1u8..8);
    let active = Controls {
        a: mask & 1 != 0,
        k: mask & 2 != 0,
        e: mask & 4 != 0,
    };
    let alpha = 10f64.powf(rng.random_range(-6.0..-1.0));
    let spec = if rng.random_bool(0.5) {
        let bg = ModelParams::new(
            p.a() * rng.random_range(0.7..1.3),
            p.k() * rng.random_range(0.7..1.3),
            EtchRate::from_fn(&g, |x| 0.5 * c * (-(x * x) / 0.25).exp()).unwrap(),
        )
        .unwrap();
        CostSpec::background(bg, alpha, active)
    } else {
        CostSpec::grad_e(alpha, active)
    };
    (p, meas, spec, g, s)
}

fn gradient_correctness() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (p, meas, spec, g, s) = random_instance(&mut rng);
        let rep = fd_check(&p, &meas, &spec, &g, &s, FD_STEP, &Component::all(g.n())).unwrap();
        worst = worst.max(rep.max_rel_error());
    }
    let secs = t.elapsed().as_secs_f64();
    (
        worst < 1e-5 && secs < 120.0,
        format!("50 instances, max relative error {worst:.2e} (< 1e-5), {secs:.1} s (< 120 s)"),
    )
}

fn transpose_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(5..=60);
        let g = Grid1D::symmetric(1.0, n).unwrap();
        let mut z: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.5)).collect();
        z[0] = 0.0;
        z[n - 1] = 0.0;
        let e = EtchRate::new((0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let p =
            ModelParams::new(rng.random_range(0.0..3.0), rng.random_range(0.0..4.0), e).unwrap();
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dt = g.dx() * g.dx() / 4.0;
        let jd = step_jvp(&z, &d, &p, &g, dt).unwrap();
        let jtw = step_vjp(&z, &w, &p, &g, dt).unwrap();
        let lhs: f64 = jd.iter().zip(&w).map(|(x, y)| x * y).sum();
        let rhs: f64 = d.iter().zip(&jtw).map(|(x, y)| x * y).sum();
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
    }
    (
        worst <= 1e-12,
        format!("100 trials, max relative defect {worst:.2e} (<= 1e-12)"),
    )
}

fn ak_identification() -> Check {
    let t = Instant::now();
    let mut p = preset("paper-3.2-ak").unwrap();
    p.noise_levels = vec![0.0];
    let problem = Problem::new(&p).unwrap();
    let meas = problem
        .measurements(&p, 0.0, 0, CostVariant::Single)
        .unwrap();
    let o = identify(&p, &problem, &meas, 0, 0.1).unwrap();
    let iters = o.trace.iterations();
    let pass = o.a_error <= 0.01 && o.k_error <= 0.01 && iters <= 100;
    let mut detail = format!(
        "alpha 0.1: a = {:.4}, k = {:.4} (errors {:.2e}, {:.2e}; need <= 1e-2), {iters} iterations (<= 100), {:.1} s",
        o.params.a(),
        o.params.k(),
        o.a_error,
        o.k_error,
        t.elapsed().as_secs_f64()
    );
    if !pass {
        // same data and start with a weak penalty, to show the data do
        // determine (a, k) and the penalty is what holds them back
        let w = identify(&p, &problem, &meas, 0, 1e-8).unwrap();
        detail.push_str(&format!(
            "; with alpha 1e-8: a = {:.4}, k = {:.4} in {} iterations",
            w.params.a(),
            w.params.k(),
            w.trace.iterations()
        ));
    }
    (pass, detail)
}

fn etch_identification() -> Check {
    let mut p = preset("paper-3.2-e").unwrap();
    p.noise_levels = vec![0.0];
    let problem = Problem::new(&p).unwrap();
    let meas = problem
        .measurements(&p, 0.0, 0, CostVariant::Single)
        .unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, start) in p.starts.iter().enumerate() {
        let o = identify(&p, &problem, &meas, i, 1e-6).unwrap();
        let iters = o.trace.iterations();
        pass &= o.etch_error < 0.01 && (5..=100).contains(&iters);
        parts.push(format!(
            "{} start: E error {:.2e}, {iters} iterations",
            start.name, o.etch_error
        ));
    }
    (pass, format!("{} (need < 1e-2, 5..=100)", parts.join("; ")))
}

fn trench_workflow() -> Check {
    let t = Instant::now();
    let p = preset("paper-3.3").unwrap();
    let problem = Problem::new(&p).unwrap();
    let meas = problem
        .measurements(&p, p.noise_levels[0], 0, CostVariant::Single)
        .unwrap();
    let o = identify(&p, &problem, &meas, 0, 1e-5).unwrap();
    let fit = o.trace.final_cost().misfit.sqrt();
    (
        o.trench_error < 0.03,
        format!(
            "{} nodes, {}% noise, alpha 1e-5: trench error {:.2e} (< 3e-2), misfit norm {fit:.2e}, {} iterations, {:.0} s",
            p.grid.n(),
            p.noise_levels[0],
            o.trench_error,
            o.trace.iterations(),
            t.elapsed().as_secs_f64()
        ),
    )
}

fn sensitivity_matrix() -> Vec<(String, Check)> {
    let t = Instant::now();
    let p = preset("table1-reduced").unwrap();
    let r = run_sensitivity(&p, Some(5), None).unwrap();
    let mean = |v: CostVariant, l: f64| r.summary(v, l).mean;
    let secs = t.elapsed().as_secs_f64();
    let mut out = Vec::new();

    let low: Vec<f64> = [1.0, 2.0]
        .iter()
        .map(|&l| mean(CostVariant::Single, l))
        .collect();
    out.push((
        "6a".into(),
        (
            low.iter().all(|e| (5e-4..=1e-2).contains(e)),
            format!(
                "single-trench mean error at 1%/2%: {:.2e}/{:.2e} (need within [5e-4, 1e-2])",
                low[0], low[1]
            ),
        ),
    ));

    let mut ok = true;
    let mut worst = f64::NEG_INFINITY;
    for &l in r.noise_levels.iter().filter(|&&l| l >= 20.0) {
        let single = mean(CostVariant::Single, l);
        for &v in &r.variants[1..] {
            ok &= mean(v, l) <= single;
            worst = worst.max(mean(v, l) / single);
        }
    }
    out.push((
        "6b".into(),
        (
            ok,
            format!("noise >= 20%: largest multi/single mean-error ratio {worst:.3} (need <= 1)"),
        ),
    ));

    let mut rhos = Vec::new();
    for &v in &r.variants {
        let means: Vec<f64> = r.noise_levels.iter().map(|&l| mean(v, l)).collect();
        rhos.push(spearman(&r.noise_levels, &means).unwrap_or(f64::NAN));
    }
    let min_rho = rhos.iter().copied().fold(f64::INFINITY, f64::min);
    out.push((
        "6c".into(),
        (
            min_rho >= 0.7,
            format!(
                "rank correlation of error with noise per variant: {} (need >= 0.7)",
                rhos.iter()
                    .map(|r| format!("{r:.3}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        ),
    ));

    let mut worst_gap = 0.0f64;
    for (ind, sup) in [
        (CostVariant::Independent2, CostVariant::Superposed2),
        (CostVariant::Independent3, CostVariant::Superposed3),
    ] {
        for &l in &r.noise_levels {
            let (a, b) = (mean(ind, l), mean(sup, l));
            worst_gap = worst_gap.max((a - b).abs() / a.max(b));
        }
    }
    out.push((
        "6d".into(),
        (
            worst_gap < 0.3,
            format!("independent vs superposed: largest relative gap {worst_gap:.2e} over all levels (need < 0.3)"),
        ),
    ));
    out.push((
        "6 runtime".into(),
        (
            r.failures() == 0 && secs < 1800.0,
            format!(
                "{} runs on {} nodes in {secs:.0} s with {} threads (need < 1800 s), {} failed",
                r.cells.len(),
                p.grid.n(),
                rayon::current_num_threads(),
                r.failures()
            ),
        ),
    ));
    out
}

fn combined_gradients_agree() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(8..=40);
        let g = Grid1D::symmetric(1.0, n).unwrap();
        let s = TimeScheme::default_for(&g, rng.random_range(0.1..0.5)).unwrap();
        let e = EtchRate::new((0..n).map(|_| rng.random_range(0.0..0.6)).collect()).unwrap();
        let p =
            ModelParams::new(rng.random_range(0.5..2.5), rng.random_range(0.5..4.0), e).unwrap();
        let profiles: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                let mut d: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.3)).collect();
                d[0] = 0.0;
                d[n - 1] = 0.0;
                d
            })
            .collect();
        let spec = CostSpec::grad_e(0.0, Controls::E);
        let ind = MeasurementSet::new(g, profiles.clone(), Combine::Independent).unwrap();
        let sup = MeasurementSet::new(g, profiles, Combine::Superposed).unwrap();
        let (_, gi) = gradient(&p, &ind, &spec, &g, &s).unwrap();
        let (_, gs) = gradient(&p, &sup, &spec, &g, &s).unwrap();
        let diff =
            gi.e.iter()
                .zip(&gs.e)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
        worst = worst.max(diff / gi.norm().max(gs.norm()));
    }
    (
        worst <= 1e-10,
        format!("20 random inputs, max relative gradient difference {worst:.2e} (<= 1e-10)"),
    )
}

fn lcurve_corner() -> Check {
    let t = Instant::now();
    let p = preset("paper-3.3").unwrap();
    let study = run_lcurve(&p, None, true).unwrap();
    let Some(corner) = &study.corner else {
        return (
            false,
            format!("only {} sweep points succeeded", study.sweep.points.len()),
        );
    };
    let best = study.best_alpha().unwrap();
    let decades = (corner.alpha / best).log10().abs();
    let table = study
        .sweep
        .points
        .iter()
        .zip(&study.trench_errors)
        .map(|(pt, e)| format!("{:.0e}:{e:.2e}", pt.alpha))
        .collect::<Vec<_>>()
        .join(" ");
    (
        decades <= 1.0 + 1e-9 && !corner.degenerate,
        format!(
            "corner alpha {:.1e}, best alpha {best:.1e}, {decades:.2} decades apart (<= 1); errors {table}; {:.0} s",
            corner.alpha,
            t.elapsed().as_secs_f64()
        ),
    )
}

fn solver_properties() -> Check {
    let g = Grid1D::symmetric(1.0, 41).unwrap();
    let e = EtchShape::GaussianBump {
        c: 0.2,
        sigma: 0.25,
    }
    .sample(&g)
    .unwrap();
    let p = ModelParams::new(2.0, 3.0, e).unwrap();
    let s = TimeScheme::default_for(&g, 1.0).unwrap();
    let traj = forward(&p, &g, &s, &[0.0; 41]).unwrap();
    let mut dirichlet = true;
    let mut monotone = true;
    for m in 1..traj.len() {
        let (prev, cur) = (traj.state(m - 1), traj.state(m));
        dirichlet &= cur[0] == 0.0 && cur[40] == 0.0;
        monotone &= cur.iter().zip(prev).all(|(c, q)| c >= q);
    }
    let run = |steps: usize| {
        awjm::model::final_profile(&p, &g, &TimeScheme::new(1.0, steps).unwrap(), &[0.0; 41])
            .unwrap()
    };
    let m0 = s.n_steps();
    let (z1, z2, z4) = (run(m0), run(2 * m0), run(4 * m0));
    let ratio = relative_l2(&z1, &z2, &g) / relative_l2(&z2, &z4, &g);
    let order = ratio.log2();
    (
        dirichlet && monotone && (order - 1.0).abs() < 0.1,
        format!("boundary exact: {dirichlet}, monotone: {monotone}, observed order in dt {order:.3} (1 +- 0.1)"),
    )
}

fn main() -> ExitCode {
    let wanted: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let run = |id: &str| wanted.is_empty() || wanted.iter().any(|w| w == id);
    let mut results: Vec<(String, String, Check)> = Vec::new();
    let mut single = |id: &str, name: &str, f: fn() -> Check| {
        if run(id) {
            let r = f();
            println!(
                "criterion {id} [{name}]: {} : {}",
                if r.0 { "PASS" } else { "FAIL" },
                r.1
            );
            results.push((id.into(), name.into(), r));
        }
    };
    single(
        "1",
        "adjoint gradient vs finite differences",
        gradient_correctness,
    );
    single("2", "single-step transpose identity", transpose_identity);
    single("3", "a/k identification, clean data", ak_identification);
    single(
        "4",
        "etch-rate identification, clean data",
        etch_identification,
    );
    single("5", "trench workflow from zero start", trench_workflow);
    single(
        "7",
        "independent vs superposed gradients",
        combined_gradients_agree,
    );
    single("8", "L-curve corner vs best weight", lcurve_corner);
    single("9", "solver properties", solver_properties);
    if run("6") {
        for (id, r) in sensitivity_matrix() {
            println!(
                "criterion {id} [sensitivity matrix]: {} : {}",
                if r.0 { "PASS" } else { "FAIL" },
                r.1
            );
            results.push((id, "sensitivity matrix".into(), r));
        }
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.2 .0)
        .map(|r| r.0.as_str())
        .collect();
    println!(
        "acceptance: {} checks, {} passed, {} failed{}",
        results.len(),
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(" ({})", failed.join(", "))
        }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
