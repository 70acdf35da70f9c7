//! Seeded, reproducible sampling of trajectories under the behavior policy
//! (and evaluation-policy rollouts for Monte Carlo ground truth).
//!
//! Trajectory `i` draws exclusively from the ChaCha stream derived from
//! `(seed, i)`, so a dataset is bit-identical no matter how sampling is
//! scheduled across threads.

use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::Fnv1a;
use crate::model::{
    BehaviorPolicy, EvaluationPolicy, ModelKind, ModelRef, ObsHistory, ObservableRecord,
    Trajectory,
};
use crate::probtables::DatasetShape;

/// A batch of sampled behavior trajectories with provenance metadata.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Content hash of (model, policy, horizon); mismatched runs are
    /// detectable downstream.
    pub fingerprint: u64,
    pub seed: u64,
    pub horizon: usize,
    pub kind: ModelKind,
    pub shape: DatasetShape,
    pub records: Vec<Trajectory>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn rng_for(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn draw(rng: &mut ChaCha8Rng, dist: &[f64]) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    dist.len() - 1
}

/// Content fingerprint of the generating inputs.
pub fn fingerprint(model: ModelRef<'_>, policy: &BehaviorPolicy, horizon: usize) -> u64 {
    let mut h = Fnv1a::new();
    h.write_usize(horizon);
    match model {
        ModelRef::Pomdp(m) => {
            h.write(b"pomdp");
            h.write_usize(m.spaces.n_u);
            h.write_usize(m.spaces.n_z);
            h.write_usize(m.spaces.n_a);
            h.write_f64_slice(&m.spaces.reward_values);
            for per_u in &m.transition {
                for row in per_u {
                    h.write_f64_slice(row);
                }
            }
            for row in &m.observation {
                h.write_f64_slice(row);
            }
            for row in &m.pre_observation {
                h.write_f64_slice(row);
            }
            for row in &m.reward {
                for &idx in row {
                    h.write_usize(idx);
                }
            }
            h.write_f64(m.gamma);
            h.write_f64_slice(&m.init);
        }
        ModelRef::Dpomdp(m) => {
            h.write(b"dpomdp");
            h.write_usize(m.spaces.n_u);
            h.write_usize(m.spaces.n_z);
            h.write_usize(m.spaces.n_a);
            h.write_usize(m.n_o());
            h.write_f64_slice(&m.spaces.reward_values);
            for per_s in &m.transition {
                for row in per_s {
                    h.write_f64_slice(row);
                }
            }
            for row in &m.independent_observation {
                h.write_f64_slice(row);
            }
            for per_z in &m.reward {
                for row in per_z {
                    for &idx in row {
                        h.write_usize(idx);
                    }
                }
            }
            h.write_f64(m.gamma);
            h.write_f64_slice(&m.init);
        }
    }
    for step in &policy.steps {
        for row in step {
            h.write_f64_slice(row);
        }
    }
    h.finish()
}

/// Samples trajectory `index` from the stream derived from `(seed, index)`.
/// Pure: identical inputs produce the identical trajectory.
pub fn sample_trajectory(
    model: ModelRef<'_>,
    policy: &BehaviorPolicy,
    horizon: usize,
    seed: u64,
    index: u64,
) -> Result<Trajectory> {
    if policy.kind != model.kind() {
        return Err(Error::KindMismatch {
            expected: model.kind(),
            got: policy.kind,
        });
    }
    let mut rng = rng_for(seed, index);
    match model {
        ModelRef::Pomdp(m) => {
            let mut u = Vec::with_capacity(horizon + 1);
            let mut z = Vec::with_capacity(horizon + 1);
            let mut a = Vec::with_capacity(horizon + 1);
            let mut r_idx = Vec::with_capacity(horizon + 1);
            let mut cur = draw(&mut rng, &m.init);
            let z_pre = draw(&mut rng, &m.pre_observation[cur]);
            for t in 0..=horizon {
                u.push(cur);
                z.push(draw(&mut rng, &m.observation[cur]));
                let act = draw(&mut rng, policy.action_dist(t, cur)?);
                a.push(act);
                r_idx.push(m.reward[cur][act]);
                if t < horizon {
                    cur = draw(&mut rng, &m.transition[act][cur]);
                }
            }
            Ok(Trajectory {
                z_pre,
                u,
                z,
                o: Vec::new(),
                a,
                r_idx,
            })
        }
        ModelRef::Dpomdp(m) => {
            let init_idx = draw(&mut rng, &m.init);
            let z_pre = init_idx / (m.spaces.n_z * m.spaces.n_u);
            let rest = init_idx % (m.spaces.n_z * m.spaces.n_u);
            let (mut cur_z, mut cur_u) = (rest / m.spaces.n_u, rest % m.spaces.n_u);
            let mut u = Vec::with_capacity(horizon + 1);
            let mut z = Vec::with_capacity(horizon + 1);
            let mut o = Vec::with_capacity(horizon + 1);
            let mut a = Vec::with_capacity(horizon + 1);
            let mut r_idx = Vec::with_capacity(horizon + 1);
            for t in 0..=horizon {
                u.push(cur_u);
                z.push(cur_z);
                o.push(draw(&mut rng, &m.independent_observation[cur_u]));
                let s = m.joint(cur_z, cur_u);
                let act = draw(&mut rng, policy.action_dist(t, s)?);
                a.push(act);
                r_idx.push(m.reward[cur_u][cur_z][act]);
                if t < horizon {
                    let s2 = draw(&mut rng, &m.transition[act][s]);
                    let (z2, u2) = m.split(s2);
                    cur_z = z2;
                    cur_u = u2;
                }
            }
            Ok(Trajectory {
                z_pre,
                u,
                z,
                o,
                a,
                r_idx,
            })
        }
    }
}

/// Samples `n` behavior trajectories. Record `i` comes from stream
/// `(seed, i)`; the result is bit-identical regardless of scheduling.
pub fn sample_dataset(
    model: ModelRef<'_>,
    policy: &BehaviorPolicy,
    horizon: usize,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::ZeroSamples);
    }
    model.ensure_valid()?;
    let mut records = Vec::with_capacity(n);
    for index in 0..n {
        records.push(sample_trajectory(model, policy, horizon, seed, index as u64)?);
    }
    Ok(Dataset {
        fingerprint: fingerprint(model, policy, horizon),
        seed,
        horizon,
        kind: model.kind(),
        shape: DatasetShape {
            n_z: model.spaces().n_z,
            n_o: model.spaces().n_o,
            n_a: model.spaces().n_a,
            reward_values: model.reward_values().to_vec(),
        },
        records,
    })
}

/// Per-record observable projection, dropping hidden states and preserving
/// order.
pub fn project_observable(dataset: &Dataset) -> Vec<ObservableRecord> {
    dataset.records.iter().map(Trajectory::to_observable).collect()
}

/// Rollout under an evaluation policy (for Monte Carlo ground truth); same
/// per-index stream discipline as behavior sampling.
pub fn sample_eval_trajectory(
    model: ModelRef<'_>,
    policy: &EvaluationPolicy,
    horizon: usize,
    seed: u64,
    index: u64,
) -> Result<Trajectory> {
    let mut rng = rng_for(seed, index);
    match model {
        ModelRef::Pomdp(m) => {
            let mut u = Vec::with_capacity(horizon + 1);
            let mut z = Vec::with_capacity(horizon + 1);
            let mut a = Vec::with_capacity(horizon + 1);
            let mut r_idx = Vec::with_capacity(horizon + 1);
            let mut cur = draw(&mut rng, &m.init);
            let z_pre = draw(&mut rng, &m.pre_observation[cur]);
            for t in 0..=horizon {
                u.push(cur);
                z.push(draw(&mut rng, &m.observation[cur]));
                let dist = policy.action_dist(
                    0,
                    t,
                    ObsHistory {
                        z: &z,
                        o: &[],
                        a: &a,
                    },
                )?;
                let act = draw(&mut rng, &dist);
                a.push(act);
                r_idx.push(m.reward[cur][act]);
                if t < horizon {
                    cur = draw(&mut rng, &m.transition[act][cur]);
                }
            }
            Ok(Trajectory {
                z_pre,
                u,
                z,
                o: Vec::new(),
                a,
                r_idx,
            })
        }
        ModelRef::Dpomdp(m) => {
            let n_o = m.n_o();
            let init_idx = draw(&mut rng, &m.init);
            let z_pre = init_idx / (m.spaces.n_z * m.spaces.n_u);
            let rest = init_idx % (m.spaces.n_z * m.spaces.n_u);
            let (mut cur_z, mut cur_u) = (rest / m.spaces.n_u, rest % m.spaces.n_u);
            let mut u = Vec::with_capacity(horizon + 1);
            let mut z = Vec::with_capacity(horizon + 1);
            let mut o = Vec::with_capacity(horizon + 1);
            let mut a = Vec::with_capacity(horizon + 1);
            let mut r_idx = Vec::with_capacity(horizon + 1);
            for t in 0..=horizon {
                u.push(cur_u);
                z.push(cur_z);
                o.push(draw(&mut rng, &m.independent_observation[cur_u]));
                let dist = policy.action_dist(
                    n_o,
                    t,
                    ObsHistory {
                        z: &z,
                        o: &o,
                        a: &a,
                    },
                )?;
                let act = draw(&mut rng, &dist);
                a.push(act);
                r_idx.push(m.reward[cur_u][cur_z][act]);
                if t < horizon {
                    let s2 = draw(&mut rng, &m.transition[act][m.joint(cur_z, cur_u)]);
                    let (z2, u2) = m.split(s2);
                    cur_z = z2;
                    cur_u = u2;
                }
            }
            Ok(Trajectory {
                z_pre,
                u,
                z,
                o,
                a,
                r_idx,
            })
        }
    }
}
