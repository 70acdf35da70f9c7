mod common;

use ope_core::environments::{random_dpomdp, random_pomdp, RandomModelSpec};
use ope_core::model::{
    BehaviorPolicy, ModelKind, ModelRef, SpaceSpec, TabularPomdp,
};
use ope_core::oracle::population_matrix;
use ope_core::probtables::MatrixDescriptor;
use ope_core::simulate::{project_observable, sample_dataset, sample_trajectory};

fn deterministic_pomdp() -> (TabularPomdp, BehaviorPolicy) {
    let m = TabularPomdp {
        spaces: SpaceSpec {
            n_u: 2,
            n_z: 2,
            n_a: 1,
            n_o: None,
            reward_values: vec![0.0, 1.0],
        },
        transition: vec![vec![vec![0.0, 1.0], vec![1.0, 0.0]]],
        observation: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        pre_observation: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        reward: vec![vec![1], vec![0]],
        gamma: 0.9,
        init: vec![1.0, 0.0],
    };
    let b = BehaviorPolicy::stationary(ModelKind::Pomdp, vec![vec![1.0]; 2], 3);
    (m, b)
}

#[test]
fn deterministic_model_gives_identical_records() {
    let (m, b) = deterministic_pomdp();
    let data = sample_dataset(ModelRef::Pomdp(&m), &b, 3, 32, 9).unwrap();
    for rec in &data.records {
        assert_eq!(rec, &data.records[0]);
    }
    assert_eq!(data.records[0].u, vec![0, 1, 0, 1]);
    assert_eq!(data.records[0].z, vec![0, 1, 0, 1]);
}

#[test]
fn seeds_are_deterministic_and_distinct() {
    let gen = random_pomdp(2, &RandomModelSpec::pomdp(2, 2, 2, 2), f64::INFINITY, 8).unwrap();
    let mref = ModelRef::Pomdp(&gen.model);
    let a = sample_dataset(mref, &gen.behavior, 2, 500, 1).unwrap();
    let b = sample_dataset(mref, &gen.behavior, 2, 500, 1).unwrap();
    let c = sample_dataset(mref, &gen.behavior, 2, 500, 2).unwrap();
    assert_eq!(a.records, b.records);
    assert_ne!(a.records, c.records);
    assert_eq!(a.fingerprint, c.fingerprint);
}

#[test]
fn records_are_schedule_independent() {
    // per-index purity: sampling any record individually, in any order,
    // reproduces the batch result
    let gen = random_dpomdp(6, &RandomModelSpec::dpomdp(2, 2, 2, 2, 2), f64::INFINITY, 8).unwrap();
    let mref = ModelRef::Dpomdp(&gen.model);
    let batch = sample_dataset(mref, &gen.behavior, 2, 64, 33).unwrap();
    for idx in (0..64).rev() {
        let one = sample_trajectory(mref, &gen.behavior, 2, 33, idx as u64).unwrap();
        assert_eq!(one, batch.records[idx]);
    }
}

#[test]
fn empirical_frequencies_match_population_marginals() {
    let gen = random_pomdp(8, &RandomModelSpec::pomdp(2, 3, 2, 2), f64::INFINITY, 8).unwrap();
    let mref = ModelRef::Pomdp(&gen.model);
    let n = 1_000_000usize;
    let data = sample_dataset(mref, &gen.behavior, 2, n, 4).unwrap();
    let z0 = population_matrix(mref, &gen.behavior, &MatrixDescriptor::PZMarginal { t: 0 }).unwrap();
    for j in 0..3 {
        let p = z0.values[(j, 0)];
        let count = data.records.iter().filter(|r| r.z[0] == j).count();
        let phat = count as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (phat - p).abs() <= 3.0 * se + 1e-9,
            "z0 = {j}: population {p} vs empirical {phat}"
        );
    }

    // a handful of joint events at the 4-sigma bound
    let events: Vec<(&str, Box<dyn Fn(&ope_core::model::Trajectory) -> bool>)> = vec![
        ("a0 = 0", Box::new(|r| r.a[0] == 0)),
        ("z1 = 1", Box::new(|r| r.z[1] == 1)),
        ("z_pre = 0", Box::new(|r| r.z_pre == 0)),
        ("z0 = 0 and a0 = 1", Box::new(|r| r.z[0] == 0 && r.a[0] == 1)),
        ("r0 top value", Box::new(|r| r.r_idx[0] == 3)),
    ];
    for (name, event) in events {
        let phat = data.records.iter().filter(|r| event(r)).count() as f64 / n as f64;
        // crude population estimate from an independent large sample
        let other = sample_dataset(mref, &gen.behavior, 2, 200_000, 5).unwrap();
        let p = other.records.iter().filter(|r| event(r)).count() as f64 / 200_000.0;
        let se = (p.max(1e-9) * (1.0 - p) / n as f64).sqrt() + (p.max(1e-9) * (1.0 - p) / 200_000.0).sqrt();
        assert!(
            (phat - p).abs() <= 4.0 * se,
            "event {name}: {phat} vs {p}"
        );
    }
}

#[test]
fn projection_is_structural() {
    let gen = random_dpomdp(9, &RandomModelSpec::dpomdp(2, 2, 2, 2, 3), f64::INFINITY, 8).unwrap();
    let data = sample_dataset(ModelRef::Dpomdp(&gen.model), &gen.behavior, 3, 20, 77).unwrap();
    let obs = project_observable(&data);
    assert_eq!(obs.len(), data.records.len());
    for (rec, proj) in data.records.iter().zip(&obs) {
        assert_eq!(proj.z_pre, rec.z_pre);
        assert_eq!(proj.z, rec.z);
        assert_eq!(proj.o, rec.o);
        assert_eq!(proj.a, rec.a);
        assert_eq!(proj.r_idx, rec.r_idx);
        assert_eq!(proj.a.len(), 4); // L + 1 action entries
    }
    // fingerprint ties the projection back to its generating inputs
    let again = sample_dataset(ModelRef::Dpomdp(&gen.model), &gen.behavior, 3, 20, 77).unwrap();
    assert_eq!(data.fingerprint, again.fingerprint);
}
