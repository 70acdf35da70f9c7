mod common;

use common::max_abs_diff;
use ope_core::environments::{
    is_counterexample_pomdp, is_sufficient_env, random_dpomdp, random_memoryless_policy,
    random_pomdp, RandomModelSpec,
};
use ope_core::estimators::{
    check_is_sufficiency, dpomdp_proxy_value, local_proxy_reward_dist, naive_is_population_value,
    naive_is_value, oracle_is_value, pomdp_proxy_value, EstimatorOptions,
};
use ope_core::model::{
    embed_behavior_policy, embed_dpomdp_as_pomdp, embed_eval_policy, BehaviorPolicy,
    EvaluationPolicy, MemorylessPolicy, ModelKind, ModelRef, SpaceSpec, TabularPomdp,
};
use ope_core::oracle::{
    exact_final_deviation_dist, exact_value, PolicyRef, DEFAULT_TERM_BUDGET,
};
use ope_core::probtables::{ContextMode, MatrixSource};
use ope_core::simulate;

fn population<'a>(model: ModelRef<'a>, behavior: &'a BehaviorPolicy) -> MatrixSource<'a> {
    MatrixSource::Population { model, behavior }
}

#[test]
fn pomdp_proxy_matches_oracle_on_seeded_models() {
    let mut checked = 0;
    for seed in 0..25u64 {
        let n = 2 + (seed % 2) as usize;
        let horizon = 1 + (seed % 3) as usize;
        let Ok(gen) = random_pomdp(
            seed,
            &RandomModelSpec::pomdp(n, n, 2, horizon),
            1e3,
            64,
        ) else {
            continue;
        };
        let pie = random_memoryless_policy(seed + 1000, ModelKind::Pomdp, &gen.model.spaces, horizon);
        let eval = EvaluationPolicy::Memoryless(pie);
        let mref = ModelRef::Pomdp(&gen.model);
        let oracle = exact_value(mref, PolicyRef::Evaluation(&eval), horizon, DEFAULT_TERM_BUDGET)
            .unwrap();
        let est = pomdp_proxy_value(
            &population(mref, &gen.behavior),
            &eval,
            horizon,
            gen.model.gamma,
            &EstimatorOptions::default(),
        )
        .unwrap();
        assert!(
            (est.v_hat - oracle.v).abs() <= 1e-8,
            "seed {seed}: {} vs {}",
            est.v_hat,
            oracle.v
        );
        for (step, dist) in est.per_step.iter().zip(&oracle.per_step) {
            assert!(max_abs_diff(&step.probs, &dist.probs) <= 1e-8);
            assert!(step.residual <= 1e-9, "normalization residual {}", step.residual);
        }
        checked += 1;
    }
    assert!(checked >= 20, "only {checked} models were certified");
}

#[test]
fn pomdp_dp_agrees_with_explicit_enumeration() {
    for seed in 0..10u64 {
        let Ok(gen) = random_pomdp(seed, &RandomModelSpec::pomdp(3, 3, 2, 2), 1e4, 64) else {
            continue;
        };
        let pie = random_memoryless_policy(seed + 7, ModelKind::Pomdp, &gen.model.spaces, 2);
        let eval = EvaluationPolicy::Memoryless(pie);
        let mref = ModelRef::Pomdp(&gen.model);
        let src = population(mref, &gen.behavior);
        let dp = pomdp_proxy_value(&src, &eval, 2, gen.model.gamma, &EstimatorOptions::default())
            .unwrap();
        let enumerated = pomdp_proxy_value(
            &src,
            &eval,
            2,
            gen.model.gamma,
            &EstimatorOptions {
                force_enumeration: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            (dp.v_hat - enumerated.v_hat).abs() <= 1e-10,
            "seed {seed}: dp {} vs enum {}",
            dp.v_hat,
            enumerated.v_hat
        );
    }
}

#[test]
fn pomdp_proxy_handles_general_policies() {
    let gen = random_pomdp(41, &RandomModelSpec::pomdp(2, 2, 2, 2), 1e3, 64).unwrap();
    let eval = EvaluationPolicy::General(Box::new(
        |t: usize, h: ope_core::model::ObsHistory<'_>| {
            // depends on the first observation too, so genuinely history-based
            let bias = if h.z[0] == 0 { 0.1 } else { -0.1 };
            let p = if h.last_z() == 0 { 0.7 + bias } else { 0.4 + bias };
            let _ = t;
            vec![p, 1.0 - p]
        },
    ));
    let mref = ModelRef::Pomdp(&gen.model);
    let oracle =
        exact_value(mref, PolicyRef::Evaluation(&eval), 2, DEFAULT_TERM_BUDGET).unwrap();
    let est = pomdp_proxy_value(
        &population(mref, &gen.behavior),
        &eval,
        2,
        gen.model.gamma,
        &EstimatorOptions::default(),
    )
    .unwrap();
    assert!(
        (est.v_hat - oracle.v).abs() <= 1e-8,
        "{} vs {}",
        est.v_hat,
        oracle.v
    );
}

#[test]
fn scalar_chain_reduces_to_behavior_distribution() {
    // |U| = |Z| = 1: the proxy estimate of a behavior-matching policy is the
    // behavior reward distribution
    let m = TabularPomdp {
        spaces: SpaceSpec {
            n_u: 1,
            n_z: 1,
            n_a: 2,
            n_o: None,
            reward_values: vec![0.25, 0.75],
        },
        transition: vec![vec![vec![1.0]], vec![vec![1.0]]],
        observation: vec![vec![1.0]],
        pre_observation: vec![vec![1.0]],
        reward: vec![vec![0, 1]],
        gamma: 0.5,
        init: vec![1.0],
    };
    let behavior =
        BehaviorPolicy::stationary(ModelKind::Pomdp, vec![vec![0.3, 0.7]], 2);
    let eval = EvaluationPolicy::Memoryless(MemorylessPolicy::stationary(
        ModelKind::Pomdp,
        vec![vec![0.3, 0.7]],
        2,
    ));
    let mref = ModelRef::Pomdp(&m);
    let est = pomdp_proxy_value(
        &population(mref, &behavior),
        &eval,
        2,
        m.gamma,
        &EstimatorOptions::default(),
    )
    .unwrap();
    let behavior_value =
        exact_value(mref, PolicyRef::Behavior(&behavior), 2, DEFAULT_TERM_BUDGET).unwrap();
    assert!((est.v_hat - behavior_value.v).abs() <= 1e-12);
}

#[test]
fn dpomdp_proxy_matches_oracle_on_seeded_models() {
    let mut checked = 0;
    for seed in 0..25u64 {
        let n_z = 2 + (seed % 3) as usize;
        let n_o = 2 + ((seed / 3) % 3) as usize;
        let horizon = 1 + (seed % 3) as usize;
        let Ok(gen) = random_dpomdp(
            seed,
            &RandomModelSpec::dpomdp(2, n_z, n_o, 2, horizon),
            1e3,
            64,
        ) else {
            continue;
        };
        let pie = random_memoryless_policy(seed + 2000, ModelKind::Dpomdp, &gen.model.spaces, horizon);
        let eval = EvaluationPolicy::Memoryless(pie);
        let mref = ModelRef::Dpomdp(&gen.model);
        let oracle = exact_value(mref, PolicyRef::Evaluation(&eval), horizon, DEFAULT_TERM_BUDGET)
            .unwrap();
        let est = dpomdp_proxy_value(
            &population(mref, &gen.behavior),
            &eval,
            horizon,
            gen.model.gamma,
            None,
            &EstimatorOptions::default(),
        )
        .unwrap();
        assert!(
            (est.v_hat - oracle.v).abs() <= 1e-8,
            "seed {seed} (n_z {n_z}, n_o {n_o}, L {horizon}): {} vs {}",
            est.v_hat,
            oracle.v
        );
        assert!(est.diagnostics.index_sets.is_some());
        checked += 1;
    }
    assert!(checked >= 15, "only {checked} models were certified");
}

#[test]
fn dpomdp_forced_full_sets_equal_auto_when_square() {
    for seed in 0..8u64 {
        let Ok(gen) = random_dpomdp(seed, &RandomModelSpec::dpomdp(2, 2, 2, 2, 2), 1e3, 64)
        else {
            continue;
        };
        let pie = random_memoryless_policy(seed + 1, ModelKind::Dpomdp, &gen.model.spaces, 2);
        let eval = EvaluationPolicy::Memoryless(pie);
        let mref = ModelRef::Dpomdp(&gen.model);
        let src = population(mref, &gen.behavior);
        let auto = dpomdp_proxy_value(&src, &eval, 2, gen.model.gamma, None, &Default::default())
            .unwrap();
        let full = dpomdp_proxy_value(
            &src,
            &eval,
            2,
            gen.model.gamma,
            Some(ope_core::probtables::IndexSets::full(2, 2)),
            &Default::default(),
        )
        .unwrap();
        assert!((auto.v_hat - full.v_hat).abs() <= 1e-8);
    }
}

#[test]
fn dpomdp_dp_agrees_with_explicit_enumeration() {
    let gen = random_dpomdp(3, &RandomModelSpec::dpomdp(2, 2, 2, 2, 2), 1e3, 64).unwrap();
    let pie = random_memoryless_policy(9, ModelKind::Dpomdp, &gen.model.spaces, 2);
    let eval = EvaluationPolicy::Memoryless(pie);
    let mref = ModelRef::Dpomdp(&gen.model);
    let src = population(mref, &gen.behavior);
    let dp =
        dpomdp_proxy_value(&src, &eval, 2, gen.model.gamma, None, &Default::default()).unwrap();
    let enumerated = dpomdp_proxy_value(
        &src,
        &eval,
        2,
        gen.model.gamma,
        None,
        &EstimatorOptions {
            force_enumeration: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert!((dp.v_hat - enumerated.v_hat).abs() <= 1e-10);
}

#[test]
fn embedded_pomdp_estimator_agrees_with_decoupled_estimator() {
    let mut checked = 0;
    for seed in 0..12u64 {
        let Ok(gen) = random_dpomdp(seed, &RandomModelSpec::dpomdp(2, 2, 2, 2, 2), 1e3, 64)
        else {
            continue;
        };
        let embedded = embed_dpomdp_as_pomdp(&gen.model).unwrap();
        let lifted_behavior = embed_behavior_policy(&gen.behavior).unwrap();
        // the embedded chain must itself be well-conditioned
        let Ok(cert) =
            ope_core::environments::certify_pomdp_invertibility(&embedded, &lifted_behavior, 2)
        else {
            continue;
        };
        if cert > 1e6 {
            continue;
        }
        let pie = random_memoryless_policy(seed + 50, ModelKind::Dpomdp, &gen.model.spaces, 2);
        let eval_d = EvaluationPolicy::Memoryless(pie.clone());
        let eval_p = EvaluationPolicy::Memoryless(embed_eval_policy(&pie).unwrap());

        let via_decoupled = dpomdp_proxy_value(
            &population(ModelRef::Dpomdp(&gen.model), &gen.behavior),
            &eval_d,
            2,
            gen.model.gamma,
            None,
            &Default::default(),
        )
        .unwrap();
        let via_embedded = pomdp_proxy_value(
            &population(ModelRef::Pomdp(&embedded), &lifted_behavior),
            &eval_p,
            2,
            embedded.gamma,
            &Default::default(),
        )
        .unwrap();
        assert!(
            (via_decoupled.v_hat - via_embedded.v_hat).abs() <= 1e-8,
            "seed {seed}: {} vs {}",
            via_decoupled.v_hat,
            via_embedded.v_hat
        );
        checked += 1;
    }
    assert!(checked >= 5, "only {checked} embedded models checked");
}

#[test]
fn local_proxy_matches_composite_oracle() {
    for seed in 0..20u64 {
        for horizon in [1usize, 2] {
            let Ok(gen) = random_pomdp(seed, &RandomModelSpec::pomdp(2, 2, 2, horizon), 1e3, 64)
            else {
                continue;
            };
            let pie =
                random_memoryless_policy(seed + 300, ModelKind::Pomdp, &gen.model.spaces, horizon);
            let mref = ModelRef::Pomdp(&gen.model);
            let est = local_proxy_reward_dist(
                &population(mref, &gen.behavior),
                &pie,
                horizon,
                &Default::default(),
            )
            .unwrap();
            let oracle =
                exact_final_deviation_dist(mref, &gen.behavior, &pie, horizon).unwrap();
            assert!(
                est.total_variation(&oracle) <= 1e-8,
                "seed {seed} L {horizon}: tv {}",
                est.total_variation(&oracle)
            );
        }
    }
}

#[test]
fn local_proxy_single_observation_averages_behavior_conditionals() {
    // |Z| = 1: W_L = [1] and the estimate is sum_a pi_e(a) P(r_L | a)
    let m = TabularPomdp {
        spaces: SpaceSpec {
            n_u: 1,
            n_z: 1,
            n_a: 2,
            n_o: None,
            reward_values: vec![0.0, 1.0],
        },
        transition: vec![vec![vec![1.0]], vec![vec![1.0]]],
        observation: vec![vec![1.0]],
        pre_observation: vec![vec![1.0]],
        reward: vec![vec![0, 1]],
        gamma: 0.9,
        init: vec![1.0],
    };
    let behavior = BehaviorPolicy::stationary(ModelKind::Pomdp, vec![vec![0.5, 0.5]], 1);
    let pie = MemorylessPolicy::stationary(ModelKind::Pomdp, vec![vec![0.2, 0.8]], 1);
    let est = local_proxy_reward_dist(
        &population(ModelRef::Pomdp(&m), &behavior),
        &pie,
        1,
        &Default::default(),
    )
    .unwrap();
    assert!((est.probs[0] - 0.2).abs() < 1e-12);
    assert!((est.probs[1] - 0.8).abs() < 1e-12);
}

#[test]
fn naive_is_self_evaluation_gives_empirical_mean_return() {
    let gen = random_pomdp(17, &RandomModelSpec::pomdp(2, 2, 2, 2), 1e3, 64).unwrap();
    let mref = ModelRef::Pomdp(&gen.model);
    let data = simulate::sample_dataset(mref, &gen.behavior, 2, 4000, 5).unwrap();
    let records = simulate::project_observable(&data);
    let shape = data.shape.clone();

    // evaluation policy := the empirical behavior conditionals themselves
    let table = ope_core::probtables::behavior_action_probs(
        &records,
        shape.n_a,
        ContextMode::FullHistory,
        1,
    )
    .unwrap();
    let lookup = table.clone();
    let eval = EvaluationPolicy::General(Box::new(
        move |t: usize, h: ope_core::model::ObsHistory<'_>| {
            let mut key = Vec::new();
            for i in 0..=t {
                key.push(h.z[i]);
                if i < t {
                    key.push(h.a[i]);
                }
            }
            lookup.lookup(t, &key).unwrap().probs.clone()
        },
    ));
    let est = naive_is_value(
        &records,
        &shape,
        &eval,
        gen.model.gamma,
        ContextMode::FullHistory,
        &EstimatorOptions {
            min_context_count: 1,
            ..Default::default()
        },
    )
    .unwrap();
    let mean: f64 = records
        .iter()
        .map(|r| r.discounted_return(&shape.reward_values, gen.model.gamma))
        .sum::<f64>()
        / records.len() as f64;
    assert!(
        (est.v_hat - mean).abs() < 1e-10,
        "{} vs mean {mean}",
        est.v_hat
    );
}

#[test]
fn oracle_is_exact_on_deterministic_setup() {
    // deterministic dynamics and policies: every weight is a ratio of ones
    let m = TabularPomdp {
        spaces: SpaceSpec {
            n_u: 2,
            n_z: 2,
            n_a: 2,
            n_o: None,
            reward_values: vec![0.0, 1.0],
        },
        transition: vec![
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        ],
        observation: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        pre_observation: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        reward: vec![vec![1, 0], vec![0, 1]],
        gamma: 0.5,
        init: vec![1.0, 0.0],
    };
    let behavior = BehaviorPolicy::stationary(
        ModelKind::Pomdp,
        vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        2,
    );
    let eval = EvaluationPolicy::Memoryless(MemorylessPolicy::stationary(
        ModelKind::Pomdp,
        vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        2,
    ));
    let mref = ModelRef::Pomdp(&m);
    let data = simulate::sample_dataset(mref, &behavior, 2, 50, 3).unwrap();
    let est = oracle_is_value(&data, &eval, &behavior, m.gamma).unwrap();
    let oracle = exact_value(mref, PolicyRef::Evaluation(&eval), 2, DEFAULT_TERM_BUDGET).unwrap();
    assert!((est.v_hat - oracle.v).abs() < 1e-12);
    assert_eq!(est.diagnostics.stderr, Some(0.0));
}

#[test]
fn oracle_is_unbiased_over_seeds() {
    let gen = random_pomdp(29, &RandomModelSpec::pomdp(2, 2, 2, 2), 1e3, 64).unwrap();
    let pie = random_memoryless_policy(77, ModelKind::Pomdp, &gen.model.spaces, 2);
    let eval = EvaluationPolicy::Memoryless(pie);
    let mref = ModelRef::Pomdp(&gen.model);
    let oracle = exact_value(mref, PolicyRef::Evaluation(&eval), 2, DEFAULT_TERM_BUDGET).unwrap();

    let seeds = 20;
    let n = 4000;
    let mut means = Vec::new();
    let mut variances = Vec::new();
    for s in 0..seeds {
        let data = simulate::sample_dataset(mref, &gen.behavior, 2, n, 1000 + s).unwrap();
        let est = oracle_is_value(&data, &eval, &gen.behavior, gen.model.gamma).unwrap();
        means.push(est.v_hat);
        let se = est.diagnostics.stderr.unwrap();
        variances.push(se * se);
    }
    let grand = means.iter().sum::<f64>() / seeds as f64;
    let pooled = (variances.iter().sum::<f64>()).sqrt() / seeds as f64;
    assert!(
        (grand - oracle.v).abs() <= 3.0 * pooled,
        "grand {grand} vs oracle {} (pooled se {pooled})",
        oracle.v
    );
}

#[test]
fn naive_is_unbiased_when_sufficiency_holds() {
    let (m, behavior, eval) = is_sufficient_env(4, 2);
    let mref = ModelRef::Pomdp(&m);
    let report =
        check_is_sufficiency(mref, &behavior, &eval, 2, DEFAULT_TERM_BUDGET).unwrap();
    assert!(report.holds, "constructed environment must satisfy the condition");

    let oracle = exact_value(mref, PolicyRef::Evaluation(&eval), 2, DEFAULT_TERM_BUDGET).unwrap();
    let seeds = 20;
    let n = 4000;
    let mut means = Vec::new();
    let mut variances = Vec::new();
    for s in 0..seeds {
        let data = simulate::sample_dataset(mref, &behavior, 2, n, 2000 + s).unwrap();
        let records = simulate::project_observable(&data);
        let est = naive_is_value(
            &records,
            &data.shape,
            &eval,
            m.gamma,
            ContextMode::FullHistory,
            &Default::default(),
        )
        .unwrap();
        means.push(est.v_hat);
        let se = est.diagnostics.stderr.unwrap();
        variances.push(se * se);
    }
    let grand = means.iter().sum::<f64>() / seeds as f64;
    let pooled = (variances.iter().sum::<f64>()).sqrt() / seeds as f64;
    assert!(
        (grand - oracle.v).abs() <= 3.0 * pooled,
        "grand {grand} vs oracle {} (pooled se {pooled})",
        oracle.v
    );
}

#[test]
fn sufficiency_fails_on_the_counterexample() {
    let (m, behavior, eval) = is_counterexample_pomdp(1.0, 0.9, 1).unwrap();
    let report = check_is_sufficiency(
        ModelRef::Pomdp(&m),
        &behavior,
        &eval,
        1,
        DEFAULT_TERM_BUDGET,
    )
    .unwrap();
    assert!(!report.holds);
}

#[test]
fn naive_population_is_matches_large_sample_empirical_is() {
    let (m, behavior, eval) = is_counterexample_pomdp(0.8, 0.6, 1).unwrap();
    let mref = ModelRef::Pomdp(&m);
    let pop = naive_is_population_value(mref, &behavior, &eval, 1, DEFAULT_TERM_BUDGET).unwrap();

    let data = simulate::sample_dataset(mref, &behavior, 1, 200_000, 11).unwrap();
    let records = simulate::project_observable(&data);
    let emp = naive_is_value(
        &records,
        &data.shape,
        &eval,
        m.gamma,
        ContextMode::FullHistory,
        &Default::default(),
    )
    .unwrap();
    let se = emp.diagnostics.stderr.unwrap();
    assert!(
        (pop.v_hat - emp.v_hat).abs() <= 4.0 * se,
        "population {} vs empirical {} (se {se})",
        pop.v_hat,
        emp.v_hat
    );
}

#[test]
fn empirical_proxy_converges_to_population_proxy() {
    let gen = random_pomdp(37, &RandomModelSpec::pomdp(2, 2, 2, 2), 1e2, 64).unwrap();
    let pie = random_memoryless_policy(37, ModelKind::Pomdp, &gen.model.spaces, 2);
    let eval = EvaluationPolicy::Memoryless(pie);
    let mref = ModelRef::Pomdp(&gen.model);
    let pop = pomdp_proxy_value(
        &population(mref, &gen.behavior),
        &eval,
        2,
        gen.model.gamma,
        &Default::default(),
    )
    .unwrap();

    let mut last_err = f64::INFINITY;
    for n in [20_000usize, 200_000] {
        let data = simulate::sample_dataset(mref, &gen.behavior, 2, n, 13).unwrap();
        let records = simulate::project_observable(&data);
        let emp = pomdp_proxy_value(
            &MatrixSource::Empirical {
                records: &records,
                shape: &data.shape,
                smoothing: 0.0,
                pool_time: false,
            },
            &eval,
            2,
            gen.model.gamma,
            &Default::default(),
        )
        .unwrap();
        let err = (emp.v_hat - pop.v_hat).abs();
        assert!(err < last_err * 1.5 + 1e-3, "error should shrink: {last_err} -> {err}");
        last_err = err;
        // normalization residual shrinks with n as well
        let worst_res = emp
            .per_step
            .iter()
            .map(|s| s.residual)
            .fold(0.0f64, f64::max);
        assert!(worst_res < 0.2, "residual {worst_res} unexpectedly large");
    }
    assert!(last_err <= 0.02, "empirical error {last_err} too large at n = 2e5");
}
