mod common;

use ope_core::environments::{
    certify_pomdp_invertibility, is_counterexample_pomdp, is_sufficient_env, medical_dpomdp,
    medical_eval_policy, random_dpomdp, random_pomdp, MedicalConfig, RandomModelSpec,
    MEDICAL_ACCEPTANCE_SEED,
};
use ope_core::model::{validate_dpomdp, validate_pomdp, BehaviorPolicy, ModelKind, ModelRef};
use ope_core::oracle::{exact_value, PolicyRef, DEFAULT_TERM_BUDGET};

#[test]
fn counterexample_model_is_valid_for_all_alphas() {
    for alpha in [0.2, 0.5, 2.0 / 3.0, 0.75, 1.0] {
        let (m, b, _e) = is_counterexample_pomdp(alpha, 0.9, 2).unwrap();
        let report = validate_pomdp(&m);
        assert!(report.is_valid(), "alpha {alpha}: {report}");
        assert!(b.validate(&m.spaces).is_valid());
    }
    assert!(is_counterexample_pomdp(0.0, 0.9, 1).is_err());
    assert!(is_counterexample_pomdp(0.5, 1.0, 1).is_err());
}

#[test]
fn counterexample_eval_policy_matches_stated_probabilities() {
    let (_m, _b, e) = is_counterexample_pomdp(0.5, 0.9, 1).unwrap();
    let p = e.memoryless().unwrap();
    // matched action on the shown observation has probability 2/3
    assert!((p.action_dist(0, 0).unwrap()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((p.action_dist(0, 1).unwrap()[1] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn medical_model_validates_at_any_seed() {
    for seed in [0u64, 1, 5, 42, MEDICAL_ACCEPTANCE_SEED] {
        let cfg = MedicalConfig::new(seed, 0.5);
        let (m, b) = medical_dpomdp(&cfg).unwrap();
        let report = validate_dpomdp(&m);
        assert!(report.is_valid(), "seed {seed}: {report}");
        assert!(b.validate(&m.spaces).is_valid());
        let e = medical_eval_policy(&cfg).unwrap();
        assert!(e.memoryless().unwrap().validate(&m.spaces).is_valid());
    }
}

#[test]
fn medical_alpha_zero_removes_hidden_dependence() {
    let cfg = MedicalConfig::new(3, 0.0);
    let (m, b) = medical_dpomdp(&cfg).unwrap();
    for z in 0..4 {
        for a in 0..2 {
            for u in 1..4 {
                assert_eq!(m.reward[u][z][a], m.reward[0][z][a], "reward varies in u");
                let p0 = b.steps[0][z * 4][a];
                let pu = b.steps[0][z * 4 + u][a];
                assert!((p0 - pu).abs() <= 1e-12, "policy varies in u");
            }
        }
    }
}

#[test]
fn medical_generation_is_deterministic() {
    let cfg = MedicalConfig::new(11, 0.5);
    let (m1, b1) = medical_dpomdp(&cfg).unwrap();
    let (m2, b2) = medical_dpomdp(&cfg).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(b1, b2);
    let e1 = medical_eval_policy(&cfg).unwrap();
    let e2 = medical_eval_policy(&cfg).unwrap();
    assert_eq!(e1.memoryless().unwrap(), e2.memoryless().unwrap());
    // alpha changes the tables, the seed stream stays aligned
    let (m3, _) = medical_dpomdp(&MedicalConfig::new(11, 0.9)).unwrap();
    assert_ne!(m1, m3);
}

#[test]
fn acceptance_seed_has_nondegenerate_value_gap() {
    let cfg = MedicalConfig::new(MEDICAL_ACCEPTANCE_SEED, 1.0);
    let (m, b) = medical_dpomdp(&cfg).unwrap();
    let e = medical_eval_policy(&cfg).unwrap();
    let mref = ModelRef::Dpomdp(&m);
    let vb = exact_value(mref, PolicyRef::Behavior(&b), 4, DEFAULT_TERM_BUDGET).unwrap();
    let ve = exact_value(mref, PolicyRef::Evaluation(&e), 4, DEFAULT_TERM_BUDGET).unwrap();
    assert!(
        (vb.v - ve.v).abs() >= 0.02,
        "value gap too small: {} vs {}",
        vb.v,
        ve.v
    );
    // and the selected proxy blocks are well conditioned
    let (worst, _sets) =
        ope_core::environments::certify_dpomdp_invertibility(&m, &b, 4).unwrap();
    assert!(worst.is_finite(), "acceptance seed must certify");
}

#[test]
fn sufficient_env_holds_by_construction() {
    let (m, b, e) = is_sufficient_env(1, 3);
    assert!(validate_pomdp(&m).is_valid());
    let report = ope_core::estimators::check_is_sufficiency(
        ModelRef::Pomdp(&m),
        &b,
        &e,
        3,
        DEFAULT_TERM_BUDGET,
    )
    .unwrap();
    assert!(report.reward_condition);
    assert!(report.transition_gap <= 1e-10);
    assert!(report.holds);
    let v = exact_value(ModelRef::Pomdp(&m), PolicyRef::Evaluation(&e), 3, DEFAULT_TERM_BUDGET)
        .unwrap();
    assert!(v.v.is_finite());
}

#[test]
fn random_generators_respect_caps_and_determinism() {
    let spec = RandomModelSpec::pomdp(2, 2, 2, 2);
    let a = random_pomdp(21, &spec, 1e3, 64).unwrap();
    let b = random_pomdp(21, &spec, 1e3, 64).unwrap();
    assert_eq!(a.model, b.model);
    assert!(a.worst_condition <= 1e3);
    assert!(validate_pomdp(&a.model).is_valid());

    let dspec = RandomModelSpec::dpomdp(2, 3, 3, 2, 2);
    let c = random_dpomdp(21, &dspec, 1e3, 64).unwrap();
    assert!(c.worst_condition <= 1e3);
    assert!(validate_dpomdp(&c.model).is_valid());
    for k in &c.index_sets.k {
        assert_eq!(k.len(), 2);
    }

    // infinite cap accepts the first sample
    let loose = random_pomdp(21, &RandomModelSpec::pomdp(2, 4, 2, 2), f64::INFINITY, 1).unwrap();
    assert!(validate_pomdp(&loose.model).is_valid());
}

#[test]
fn iid_hidden_chain_is_rejected_at_any_finite_cap() {
    // transition ignores u: observations carry no cross-time information
    let gen = random_pomdp(33, &RandomModelSpec::pomdp(2, 2, 2, 2), f64::INFINITY, 1).unwrap();
    let mut m = gen.model.clone();
    let row = vec![0.3, 0.7];
    for a in 0..2 {
        for u in 0..2 {
            m.transition[a][u] = row.clone();
        }
    }
    let worst = certify_pomdp_invertibility(&m, &gen.behavior, 2).unwrap();
    assert!(
        !worst.is_finite() || worst > 1e12,
        "iid hidden chain should be numerically singular, got {worst}"
    );
}

#[test]
fn counterexample_horizon_controls_policy_tables() {
    let (_m, b, e) = is_counterexample_pomdp(0.5, 0.5, 4).unwrap();
    assert_eq!(b.horizon(), 4);
    match e {
        ope_core::model::EvaluationPolicy::Memoryless(p) => assert_eq!(p.horizon(), 4),
        _ => unreachable!(),
    }
    let stat = BehaviorPolicy::stationary(ModelKind::Pomdp, b.steps[0].clone(), 4);
    assert_eq!(stat.steps, b.steps);
}

/// One-off screening used to choose `MEDICAL_ACCEPTANCE_SEED`; kept ignored.
/// Run with: cargo test -p ope-core --test environment_tests -- --ignored screen
#[test]
#[ignore]
fn screen_medical_acceptance_seeds() {
    use ope_core::estimators::{dpomdp_proxy_value, naive_is_value, EstimatorOptions};
    use ope_core::probtables::{ContextMode, MatrixSource};
    use ope_core::simulate;

    let scale: f64 = std::env::var("MED_SCALE").ok().and_then(|v| v.parse().ok()).unwrap_or(2.5);
    'seeds: for seed in 0..24u64 {
        let mut worst_cond: f64 = 0.0;
        let mut worst_t2_err: f64 = 0.0;
        let mut is_err_hi: f64 = f64::INFINITY;
        let mut t2_err_hi: f64 = 0.0;
        let mut gap = f64::INFINITY;
        for &alpha in &[0.0, 0.25, 0.5, 0.75, 1.0] {
            let mut cfg = MedicalConfig::new(seed, alpha);
            cfg.weight_scale = scale;
            let (m, b) = medical_dpomdp(&cfg).unwrap();
            let e = medical_eval_policy(&cfg).unwrap();
            let mref = ModelRef::Dpomdp(&m);
            let Ok((cond, _)) = ope_core::environments::certify_dpomdp_invertibility(&m, &b, 4)
            else {
                println!("seed {seed}: certification failed at alpha {alpha}");
                continue 'seeds;
            };
            if !cond.is_finite() || cond > 1e6 {
                println!("seed {seed}: condition {cond} at alpha {alpha}");
                continue 'seeds;
            }
            worst_cond = worst_cond.max(cond);
            let ve = exact_value(mref, PolicyRef::Evaluation(&e), 4, DEFAULT_TERM_BUDGET)
                .unwrap()
                .v;
            let vb = exact_value(mref, PolicyRef::Behavior(&b), 4, DEFAULT_TERM_BUDGET)
                .unwrap()
                .v;
            if alpha == 1.0 {
                gap = (vb - ve).abs();
            }
            let data = simulate::sample_dataset(mref, &b, 4, 200_000, 424_242).unwrap();
            let records = simulate::project_observable(&data);
            let t2 = dpomdp_proxy_value(
                &MatrixSource::Empirical {
                    records: &records,
                    shape: &data.shape,
                    smoothing: 1e-9,
                    pool_time: false,
                },
                &e,
                4,
                m.gamma,
                None,
                &EstimatorOptions::default(),
            );
            let t2_err = match &t2 {
                Ok(est) => (est.v_hat - ve).abs(),
                Err(err) => {
                    println!("seed {seed}: estimator failed at alpha {alpha}: {err}");
                    continue 'seeds;
                }
            };
            worst_t2_err = worst_t2_err.max(t2_err);
            let is = naive_is_value(
                &records,
                &data.shape,
                &e,
                m.gamma,
                ContextMode::LastObservation,
                &EstimatorOptions::default(),
            )
            .unwrap();
            let is_err = (is.v_hat - ve).abs();
            if alpha >= 0.75 {
                is_err_hi = is_err_hi.min(is_err);
                t2_err_hi = t2_err_hi.max(t2_err);
            }
        }
        let ok = worst_t2_err <= 0.05 && is_err_hi > t2_err_hi && gap >= 0.02;
        println!(
            "seed {seed}: cond {worst_cond:.2e} t2_err {worst_t2_err:.4} is_err_hi {is_err_hi:.4} t2_err_hi {t2_err_hi:.4} gap {gap:.4} {}",
            if ok { "OK" } else { "-" }
        );
    }
}
