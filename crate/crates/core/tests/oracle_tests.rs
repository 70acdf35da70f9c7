mod common;

use common::{brute_dpomdp, brute_pomdp, max_abs_diff};
use ope_core::environments::{random_dpomdp, random_memoryless_policy, random_pomdp, RandomModelSpec};
use ope_core::model::{
    BehaviorPolicy, EvaluationPolicy, MemorylessPolicy, ModelKind, ModelRef, SpaceSpec,
    TabularPomdp,
};
use ope_core::oracle::{
    exact_final_deviation_dist, exact_reward_dist, exact_value, monte_carlo_value,
    population_matrix, verify_lemma_identities, EvalMethod, PolicyRef, DEFAULT_TERM_BUDGET,
};
use ope_core::probtables::MatrixDescriptor;
use ope_core::simulate;

const BUDGET: u64 = DEFAULT_TERM_BUDGET;

fn single_state_pomdp() -> (TabularPomdp, BehaviorPolicy) {
    let m = TabularPomdp {
        spaces: SpaceSpec {
            n_u: 1,
            n_z: 1,
            n_a: 1,
            n_o: None,
            reward_values: vec![1.0],
        },
        transition: vec![vec![vec![1.0]]],
        observation: vec![vec![1.0]],
        pre_observation: vec![vec![1.0]],
        reward: vec![vec![0]],
        gamma: 0.5,
        init: vec![1.0],
    };
    let b = BehaviorPolicy::stationary(ModelKind::Pomdp, vec![vec![1.0]], 8);
    (m, b)
}

#[test]
fn geometric_sum_on_trivial_model() {
    let (m, b) = single_state_pomdp();
    let v = exact_value(ModelRef::Pomdp(&m), PolicyRef::Behavior(&b), 2, BUDGET).unwrap();
    assert!((v.v - 1.75).abs() < 1e-15);
}

#[test]
fn memoryless_eval_value_matches_exhaustive_enumeration() {
    // seeded random 2-state POMDP, L = 2
    let gen = random_pomdp(7, &RandomModelSpec::pomdp(2, 2, 2, 2), f64::INFINITY, 8).unwrap();
    let pie = random_memoryless_policy(7, ModelKind::Pomdp, &gen.model.spaces, 2);
    let eval = EvaluationPolicy::Memoryless(pie.clone());
    let got = exact_value(
        ModelRef::Pomdp(&gen.model),
        PolicyRef::Evaluation(&eval),
        2,
        BUDGET,
    )
    .unwrap();
    assert_eq!(got.method, EvalMethod::MarginalRecursion);

    let brute = brute_pomdp(
        &gen.model,
        &|t, _us, zs, _os, _aas| pie.action_dist(t, zs[t]).unwrap().to_vec(),
        2,
    );
    assert!((got.v - brute.v).abs() < 1e-12, "{} vs {}", got.v, brute.v);
    for t in 0..=2 {
        assert!(max_abs_diff(&got.per_step[t].probs, &brute.per_step[t]) < 1e-12);
    }
}

#[test]
fn general_policy_path_agrees_with_memoryless_path() {
    let gen = random_pomdp(11, &RandomModelSpec::pomdp(2, 3, 2, 2), f64::INFINITY, 8).unwrap();
    let pie = random_memoryless_policy(11, ModelKind::Pomdp, &gen.model.spaces, 2);
    let table = pie.clone();
    let general = EvaluationPolicy::General(Box::new(
        move |t: usize, h: ope_core::model::ObsHistory<'_>| {
            table.action_dist(t, h.last_z()).unwrap().to_vec()
        },
    ));
    let via_general = exact_value(
        ModelRef::Pomdp(&gen.model),
        PolicyRef::Evaluation(&general),
        2,
        BUDGET,
    )
    .unwrap();
    assert_eq!(via_general.method, EvalMethod::HistoryEnumeration);
    let via_memoryless = exact_value(
        ModelRef::Pomdp(&gen.model),
        PolicyRef::Evaluation(&EvaluationPolicy::Memoryless(pie)),
        2,
        BUDGET,
    )
    .unwrap();
    assert!((via_general.v - via_memoryless.v).abs() < 1e-12);
}

#[test]
fn general_policy_purity_gives_identical_results() {
    let gen = random_pomdp(3, &RandomModelSpec::pomdp(2, 2, 2, 1), f64::INFINITY, 8).unwrap();
    let general = EvaluationPolicy::General(Box::new(
        |_t: usize, h: ope_core::model::ObsHistory<'_>| {
            if h.last_z() == 0 {
                vec![0.8, 0.2]
            } else {
                vec![0.3, 0.7]
            }
        },
    ));
    let a = exact_value(
        ModelRef::Pomdp(&gen.model),
        PolicyRef::Evaluation(&general),
        1,
        BUDGET,
    )
    .unwrap();
    let b = exact_value(
        ModelRef::Pomdp(&gen.model),
        PolicyRef::Evaluation(&general),
        1,
        BUDGET,
    )
    .unwrap();
    assert_eq!(a.v.to_bits(), b.v.to_bits());
}

#[test]
fn dpomdp_values_match_exhaustive_enumeration() {
    let gen = random_dpomdp(5, &RandomModelSpec::dpomdp(2, 2, 2, 2, 2), f64::INFINITY, 8).unwrap();
    let m = &gen.model;
    // behavior value
    let got = exact_value(ModelRef::Dpomdp(m), PolicyRef::Behavior(&gen.behavior), 2, BUDGET)
        .unwrap();
    let b = &gen.behavior;
    let brute = brute_dpomdp(
        m,
        &|t, us, zs, _os, _aas| {
            b.action_dist(t, zs[t] * m.spaces.n_u + us[t]).unwrap().to_vec()
        },
        2,
    );
    assert!((got.v - brute.v).abs() < 1e-12);

    // memoryless evaluation value at t = 1 reward distribution
    let pie = random_memoryless_policy(5, ModelKind::Dpomdp, &m.spaces, 2);
    let eval = EvaluationPolicy::Memoryless(pie.clone());
    let dist = exact_reward_dist(ModelRef::Dpomdp(m), &eval, 1, BUDGET).unwrap();
    let n_o = m.n_o();
    let brute = brute_dpomdp(
        m,
        &|t, _us, zs, os, _aas| pie.action_dist(t, zs[t] * n_o + os[t]).unwrap().to_vec(),
        1,
    );
    assert!(max_abs_diff(&dist.probs, &brute.per_step[1]) < 1e-12);
}

#[test]
fn per_step_distributions_agree_between_value_and_reward_dist() {
    for seed in 0..20 {
        let gen =
            random_pomdp(seed, &RandomModelSpec::pomdp(2, 2, 2, 3), f64::INFINITY, 8).unwrap();
        let pie = random_memoryless_policy(seed, ModelKind::Pomdp, &gen.model.spaces, 3);
        let eval = EvaluationPolicy::Memoryless(pie);
        let value = exact_value(
            ModelRef::Pomdp(&gen.model),
            PolicyRef::Evaluation(&eval),
            3,
            BUDGET,
        )
        .unwrap();
        for t in 0..=3 {
            let dist = exact_reward_dist(ModelRef::Pomdp(&gen.model), &eval, t, BUDGET).unwrap();
            assert!(max_abs_diff(&dist.probs, &value.per_step[t].probs) < 1e-12);
            let total: f64 = dist.probs.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn degenerate_spaces_give_point_mass() {
    let (m, _) = single_state_pomdp();
    let eval = EvaluationPolicy::Memoryless(MemorylessPolicy::stationary(
        ModelKind::Pomdp,
        vec![vec![1.0]],
        3,
    ));
    let dist = exact_reward_dist(ModelRef::Pomdp(&m), &eval, 2, BUDGET).unwrap();
    assert_eq!(dist.probs, vec![1.0]);
}

#[test]
fn full_observability_reduces_eval_to_behavior() {
    // O = identity and pi_e := pi_b read through z
    let gen = random_pomdp(13, &RandomModelSpec::pomdp(3, 3, 2, 2), f64::INFINITY, 8).unwrap();
    let mut m = gen.model.clone();
    for u in 0..3 {
        for z in 0..3 {
            m.observation[u][z] = if u == z { 1.0 } else { 0.0 };
        }
    }
    m.pre_observation = m.observation.clone();
    let lifted = MemorylessPolicy {
        kind: ModelKind::Pomdp,
        steps: gen.behavior.steps.clone(),
    };
    let eval = EvaluationPolicy::Memoryless(lifted);
    for t in 0..=2 {
        let via_eval = exact_reward_dist(ModelRef::Pomdp(&m), &eval, t, BUDGET).unwrap();
        let via_behavior = exact_value(
            ModelRef::Pomdp(&m),
            PolicyRef::Behavior(&gen.behavior),
            t,
            BUDGET,
        )
        .unwrap();
        assert!(max_abs_diff(&via_eval.probs, &via_behavior.per_step[t].probs) < 1e-12);
    }
}

#[test]
fn population_matrix_copy_dynamics_is_identity() {
    // deterministic-copy model: u' = u surely, z = u surely, so z_t = z_{t-1}
    let n = 3;
    let mut transition = vec![vec![vec![0.0; n]; n]; 2];
    for a in 0..2 {
        for u in 0..n {
            transition[a][u][u] = 1.0;
        }
    }
    let mut observation = vec![vec![0.0; n]; n];
    for u in 0..n {
        observation[u][u] = 1.0;
    }
    let m = TabularPomdp {
        spaces: SpaceSpec {
            n_u: n,
            n_z: n,
            n_a: 2,
            n_o: None,
            reward_values: vec![0.0, 1.0],
        },
        transition,
        pre_observation: observation.clone(),
        observation,
        reward: vec![vec![0, 1]; 3],
        gamma: 0.9,
        init: vec![0.2, 0.3, 0.5],
    };
    let b = BehaviorPolicy::stationary(ModelKind::Pomdp, vec![vec![0.5, 0.5]; 3], 4);
    for t in [1usize, 2] {
        for a in 0..2 {
            let mat = population_matrix(
                ModelRef::Pomdp(&m),
                &b,
                &MatrixDescriptor::PZGivenAZprev { t, a },
            )
            .unwrap();
            for r in 0..n {
                for c in 0..n {
                    let expect = if r == c { 1.0 } else { 0.0 };
                    assert!((mat.values[(r, c)] - expect).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn population_marginal_of_single_observation_is_one() {
    let m = TabularPomdp {
        spaces: SpaceSpec {
            n_u: 2,
            n_z: 1,
            n_a: 1,
            n_o: None,
            reward_values: vec![0.0, 1.0],
        },
        transition: vec![vec![vec![0.5, 0.5]; 2]],
        observation: vec![vec![1.0]; 2],
        pre_observation: vec![vec![1.0]; 2],
        reward: vec![vec![0], vec![1]],
        gamma: 0.9,
        init: vec![0.5, 0.5],
    };
    let b = BehaviorPolicy::stationary(ModelKind::Pomdp, vec![vec![1.0]; 2], 2);
    let mat = population_matrix(
        ModelRef::Pomdp(&m),
        &b,
        &MatrixDescriptor::PZMarginal { t: 0 },
    )
    .unwrap();
    assert_eq!(mat.values.nrows(), 1);
    assert!((mat.values[(0, 0)] - 1.0).abs() < 1e-15);
}

#[test]
fn population_matrix_matches_simulated_frequencies() {
    let gen = random_pomdp(19, &RandomModelSpec::pomdp(2, 2, 2, 2), f64::INFINITY, 8).unwrap();
    let m = &gen.model;
    let mat = population_matrix(
        ModelRef::Pomdp(m),
        &gen.behavior,
        &MatrixDescriptor::PZGivenAZprev { t: 1, a: 0 },
    )
    .unwrap();
    let n = 1_000_000usize;
    let data = simulate::sample_dataset(ModelRef::Pomdp(m), &gen.behavior, 1, n, 99).unwrap();
    let mut joint = vec![vec![0u64; 2]; 2];
    let mut cond = vec![0u64; 2];
    for rec in &data.records {
        if rec.a[1] != 0 {
            continue;
        }
        cond[rec.z[0]] += 1;
        joint[rec.z[1]][rec.z[0]] += 1;
    }
    for c in 0..2 {
        for r in 0..2 {
            let p = mat.values[(r, c)];
            let phat = joint[r][c] as f64 / cond[c] as f64;
            let se = (p * (1.0 - p) / cond[c] as f64).sqrt();
            assert!(
                (phat - p).abs() <= 3.0 * se + 1e-9,
                "entry ({r},{c}): pop {p} vs emp {phat} (se {se})"
            );
        }
    }
}

#[test]
fn lemma_identities_hold_on_seeded_models() {
    for seed in 0..6 {
        let gen =
            random_pomdp(seed, &RandomModelSpec::pomdp(2, 3, 2, 3), f64::INFINITY, 8).unwrap();
        for t in 1..=3 {
            let report =
                verify_lemma_identities(ModelRef::Pomdp(&gen.model), &gen.behavior, t).unwrap();
            assert!(
                report.max_residual <= 1e-10,
                "seed {seed} t {t}: residual {}",
                report.max_residual
            );
        }
        let gen =
            random_dpomdp(seed, &RandomModelSpec::dpomdp(2, 3, 3, 2, 3), f64::INFINITY, 8)
                .unwrap();
        for t in 1..=3 {
            let report =
                verify_lemma_identities(ModelRef::Dpomdp(&gen.model), &gen.behavior, t).unwrap();
            assert!(
                report.max_residual <= 1e-10,
                "decoupled seed {seed} t {t}: residual {}",
                report.max_residual
            );
        }
    }
}

#[test]
fn monte_carlo_is_deterministic_and_converges() {
    let gen = random_pomdp(23, &RandomModelSpec::pomdp(2, 2, 2, 2), f64::INFINITY, 8).unwrap();
    let pie = random_memoryless_policy(23, ModelKind::Pomdp, &gen.model.spaces, 2);
    let eval = EvaluationPolicy::Memoryless(pie);
    let mref = ModelRef::Pomdp(&gen.model);

    let (v1, s1) = monte_carlo_value(mref, &eval, 2, 20_000, 42).unwrap();
    let (v2, s2) = monte_carlo_value(mref, &eval, 2, 20_000, 42).unwrap();
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert_eq!(s1.to_bits(), s2.to_bits());

    let exact = exact_value(mref, PolicyRef::Evaluation(&eval), 2, BUDGET).unwrap();
    assert!((v1 - exact.v).abs() <= 4.0 * s1, "{v1} vs {}", exact.v);

    // stderr shrinks roughly like sqrt(2) when n doubles
    let (_, s_half) = monte_carlo_value(mref, &eval, 2, 10_000, 42).unwrap();
    let ratio = s_half / s1;
    assert!(
        (1.2..=1.7).contains(&ratio),
        "stderr ratio {ratio} outside [1.2, 1.7]"
    );
}

#[test]
fn monte_carlo_deterministic_model_has_zero_stderr() {
    let (m, _) = single_state_pomdp();
    let eval = EvaluationPolicy::Memoryless(MemorylessPolicy::stationary(
        ModelKind::Pomdp,
        vec![vec![1.0]],
        2,
    ));
    let (v, s) = monte_carlo_value(ModelRef::Pomdp(&m), &eval, 2, 100, 7).unwrap();
    assert!((v - 1.75).abs() < 1e-12);
    assert_eq!(s, 0.0);
}

#[test]
fn final_deviation_dist_matches_brute_force_composite() {
    let gen = random_pomdp(31, &RandomModelSpec::pomdp(2, 3, 2, 2), f64::INFINITY, 8).unwrap();
    let pie = random_memoryless_policy(31, ModelKind::Pomdp, &gen.model.spaces, 2);
    let horizon = 2;
    let got =
        exact_final_deviation_dist(ModelRef::Pomdp(&gen.model), &gen.behavior, &pie, horizon)
            .unwrap();
    let b = &gen.behavior;
    let pie2 = pie.clone();
    let brute = brute_pomdp(
        &gen.model,
        &|t, us, zs, _os, _aas| {
            if t == horizon {
                pie2.action_dist(t, zs[t]).unwrap().to_vec()
            } else {
                b.action_dist(t, us[t]).unwrap().to_vec()
            }
        },
        horizon,
    );
    assert!(max_abs_diff(&got.probs, &brute.per_step[horizon]) < 1e-12);
}

#[test]
fn embedded_dpomdp_preserves_policy_values() {
    for seed in 0..50 {
        let gen =
            random_dpomdp(seed, &RandomModelSpec::dpomdp(2, 2, 2, 2, 2), f64::INFINITY, 8)
                .unwrap();
        let embedded = ope_core::model::embed_dpomdp_as_pomdp(&gen.model).unwrap();
        let lifted = ope_core::model::embed_behavior_policy(&gen.behavior).unwrap();
        let v_orig = exact_value(
            ModelRef::Dpomdp(&gen.model),
            PolicyRef::Behavior(&gen.behavior),
            2,
            BUDGET,
        )
        .unwrap();
        let v_embed = exact_value(
            ModelRef::Pomdp(&embedded),
            PolicyRef::Behavior(&lifted),
            2,
            BUDGET,
        )
        .unwrap();
        assert!(
            (v_orig.v - v_embed.v).abs() <= 1e-12,
            "seed {seed}: {} vs {}",
            v_orig.v,
            v_embed.v
        );
    }
}
