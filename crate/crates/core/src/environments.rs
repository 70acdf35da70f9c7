//! Packaged synthetic environments and seeded random model generators.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{ln, sigmoid, sqrt};
use crate::model::{
    BehaviorPolicy, EvaluationPolicy, MemorylessPolicy, ModelKind, ModelRef, SpaceSpec,
    TabularDpomdp, TabularPomdp,
};
use crate::probtables::{select_index_sets, IndexSets, MatrixDescriptor, MatrixSource};

/// Committed seed for the medical environment's acceptance runs, chosen by
/// pre-screening for finite condition numbers and a non-degenerate policy
/// value gap.
pub const MEDICAL_ACCEPTANCE_SEED: u64 = 472;

// ---------------------------------------------------------------------------
// importance-sampling bias counterexample
// ---------------------------------------------------------------------------

/// The packaged 6-state / 2-observation confounded POMDP on which
/// observable-history importance sampling is strongly biased.
///
/// States pair a layer `k` (start, deteriorated, recovered) with a hidden
/// type `j`; the behavior policy matches the type with probability 2/3, the
/// stationary evaluation policy matches the current observation with
/// probability 2/3. Observations are weakly anti-informative at the start
/// and deteriorated layers and mostly truthful at the recovered layer;
/// type-matched first treatment recovers the patient. Rewards are
/// `alpha/2` / `0` at the start, `0` / `1 - alpha` when deteriorated, and
/// `alpha` / `alpha/2` when recovered (matched / mismatched action).
pub fn is_counterexample_pomdp(
    alpha: f64,
    gamma: f64,
    horizon: usize,
) -> Result<(TabularPomdp, BehaviorPolicy, EvaluationPolicy)> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must be in (0, 1], got {alpha}"
        )));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "gamma must be in (0, 1), got {gamma}"
        )));
    }
    let p = [0.25, 0.25, 0.75]; // P(z = type | layer)
    let sid = |k: usize, j: usize| 2 * k + j;

    let mut reward_values: Vec<f64> = vec![0.0, alpha / 2.0, 1.0 - alpha, alpha];
    reward_values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    reward_values.dedup();
    let ridx = |v: f64| -> usize {
        reward_values
            .iter()
            .position(|&r| r == v)
            .expect("value in support")
    };

    let mut observation = vec![vec![0.0; 2]; 6];
    let mut transition = vec![vec![vec![0.0; 6]; 6]; 2];
    let mut reward = vec![vec![0; 2]; 6];
    for j in 0..2usize {
        for k in 0..3usize {
            let s = sid(k, j);
            observation[s][j] = p[k];
            observation[s][1 - j] = 1.0 - p[k];
        }
        for a in 0..2usize {
            let matched = a == j;
            // start: matched treatment recovers, mismatch deteriorates
            transition[a][sid(0, j)][if matched { sid(2, j) } else { sid(1, j) }] = 1.0;
            // outer layers absorb
            transition[a][sid(1, j)][sid(1, j)] = 1.0;
            transition[a][sid(2, j)][sid(2, j)] = 1.0;
            reward[sid(0, j)][a] = ridx(if matched { alpha / 2.0 } else { 0.0 });
            reward[sid(1, j)][a] = ridx(if matched { 0.0 } else { 1.0 - alpha });
            reward[sid(2, j)][a] = ridx(if matched { alpha } else { alpha / 2.0 });
        }
    }

    let model = TabularPomdp {
        spaces: SpaceSpec {
            n_u: 6,
            n_z: 2,
            n_a: 2,
            n_o: None,
            reward_values,
        },
        transition,
        pre_observation: observation.clone(),
        observation,
        reward,
        gamma,
        init: vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0],
    };

    let mut pib = vec![vec![0.0; 2]; 6];
    for j in 0..2usize {
        for k in 0..3usize {
            pib[sid(k, j)][j] = 2.0 / 3.0;
            pib[sid(k, j)][1 - j] = 1.0 / 3.0;
        }
    }
    let behavior = BehaviorPolicy::stationary(ModelKind::Pomdp, pib, horizon);
    let pie = vec![vec![2.0 / 3.0, 1.0 / 3.0], vec![1.0 / 3.0, 2.0 / 3.0]];
    let eval = EvaluationPolicy::Memoryless(MemorylessPolicy::stationary(
        ModelKind::Pomdp,
        pie,
        horizon,
    ));
    Ok((model, behavior, eval))
}

// ---------------------------------------------------------------------------
// synthetic medical environment
// ---------------------------------------------------------------------------

/// Configuration of the synthetic medical decoupled POMDP. All weight
/// tables are sampled i.i.d. standard normal from `seed` (evaluation-policy
/// weights from a separate stream); regenerating with the same seed
/// reproduces identical tables.
#[derive(Debug, Clone)]
pub struct MedicalConfig {
    pub seed: u64,
    /// Confoundedness: 0 removes all hidden-state dependence from rewards
    /// and the behavior policy.
    pub alpha: f64,
    pub horizon: usize,
    /// Standard deviation of the sampled weight vectors; larger values give
    /// sharper kernels, stronger proxy channels, and better-conditioned
    /// matrices.
    pub weight_scale: f64,
    /// Separate scale for the independent-observation weights; sharp
    /// observations keep the hidden-state posterior spread visible in the
    /// proxy blocks.
    pub obs_scale: f64,
    /// Separate scale for the behavior-policy weights; kept moderate so
    /// every action retains coverage in logged data even at full
    /// confoundedness.
    pub policy_scale: f64,
}

impl MedicalConfig {
    pub fn new(seed: u64, alpha: f64) -> Self {
        MedicalConfig {
            seed,
            alpha,
            horizon: 4,
            weight_scale: 2.5,
            obs_scale: 6.0,
            policy_scale: 1.2,
        }
    }

    fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

const MED_N: usize = 4; // |Z| = |U| = |O|, two binary features each
const MED_A: usize = 2;
const MED_REWARDS: usize = 8;

fn bits(x: usize) -> [f64; 2] {
    [(x & 1) as f64, ((x >> 1) & 1) as f64]
}

/// Feature map: the entity's two bits plus a constant-one component.
fn phi(x: usize) -> [f64; 3] {
    let b = bits(x);
    [b[0], b[1], 1.0]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct NormalStream {
    rng: ChaCha8Rng,
    scale: f64,
}

impl NormalStream {
    fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        NormalStream { rng, scale: 1.0 }
    }

    /// One normal draw (Box-Muller, one uniform pair per draw).
    fn next(&mut self) -> f64 {
        let u1: f64 = 1.0 - self.rng.random::<f64>();
        let u2: f64 = self.rng.random();
        self.scale * sqrt(-2.0 * ln(u1)) * crate::math::cos(2.0 * core::f64::consts::PI * u2)
    }

    fn vector(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.next()).collect()
    }
}

struct MedicalWeights {
    c_z: Vec<Vec<Vec<Vec<f64>>>>,    // [z][z'][a] -> R^3
    c_o: Vec<Vec<Vec<f64>>>,         // [u][o] -> R^3
    c_mood: Vec<Vec<Vec<Vec<f64>>>>, // [u][a][m'] -> R^3
    c_look: Vec<Vec<Vec<Vec<f64>>>>, // [z'][look][look'] -> R^5
    c_r_z: Vec<Vec<Vec<f64>>>,       // [z][a] -> R^3
    c_r_u: Vec<Vec<Vec<f64>>>,       // [u][a] -> R^3
    c_b_z: Vec<Vec<Vec<f64>>>,       // [z][a] -> R^3
    c_b_u: Vec<Vec<Vec<f64>>>,       // [u][a] -> R^3
}

fn medical_weights(seed: u64, scale: f64, obs_scale: f64, policy_scale: f64) -> MedicalWeights {
    let mut s = NormalStream::new(seed, 0);
    s.scale = scale;
    let c_z = (0..MED_N)
        .map(|_| {
            (0..MED_N)
                .map(|_| (0..MED_A).map(|_| s.vector(3)).collect())
                .collect()
        })
        .collect();
    s.scale = obs_scale;
    let c_o = (0..MED_N)
        .map(|_| (0..MED_N).map(|_| s.vector(3)).collect())
        .collect();
    s.scale = scale;
    let c_mood = (0..MED_N)
        .map(|_| {
            (0..MED_A)
                .map(|_| (0..2).map(|_| s.vector(3)).collect())
                .collect()
        })
        .collect();
    let c_look = (0..MED_N)
        .map(|_| {
            (0..2)
                .map(|_| (0..2).map(|_| s.vector(5)).collect())
                .collect()
        })
        .collect();
    let c_r_z = (0..MED_N)
        .map(|_| (0..MED_A).map(|_| s.vector(3)).collect())
        .collect();
    let c_r_u = (0..MED_N)
        .map(|_| (0..MED_A).map(|_| s.vector(3)).collect())
        .collect();
    s.scale = policy_scale;
    let c_b_z = (0..MED_N)
        .map(|_| (0..MED_A).map(|_| s.vector(3)).collect())
        .collect();
    let c_b_u = (0..MED_N)
        .map(|_| (0..MED_A).map(|_| s.vector(3)).collect())
        .collect();
    MedicalWeights {
        c_z,
        c_o,
        c_mood,
        c_look,
        c_r_z,
        c_r_u,
        c_b_z,
        c_b_u,
    }
}

/// Normalizes per-outcome sigmoid scores into a distribution.
fn sigmoid_kernel(scores: &[f64]) -> Vec<f64> {
    let vals: Vec<f64> = scores.iter().map(|&x| sigmoid(x)).collect();
    let sum: f64 = vals.iter().sum();
    vals.into_iter().map(|v| v / sum).collect()
}

/// Builds the synthetic medical decoupled POMDP and its behavior policy.
///
/// The hidden state packs `(mood, look)` as `u = mood * 2 + look`. The
/// observed state chain, mood chain, and look chain factorize as
/// `P(z'|z,a) * P(mood'|u,a) * P(look'|z',look)`, each a normalized
/// per-outcome sigmoid score. The reward is the sigmoid score of the
/// `alpha`-mixed observed/hidden features, rounded to the nearest value of
/// an 8-point uniform grid on [0, 1]. The initial joint distribution over
/// `(z_pre, z0, u0)` realizes one virtual behavior step from a uniform
/// `(z_pre, u_pre)`.
pub fn medical_dpomdp(cfg: &MedicalConfig) -> Result<(TabularDpomdp, BehaviorPolicy)> {
    cfg.check()?;
    let w = medical_weights(cfg.seed, cfg.weight_scale, cfg.obs_scale, cfg.policy_scale);
    let alpha = cfg.alpha;

    // observed-state chain
    let mut p_z = vec![vec![vec![0.0; MED_N]; MED_N]; MED_A]; // [a][z][z']
    for z in 0..MED_N {
        for a in 0..MED_A {
            let scores: Vec<f64> = (0..MED_N)
                .map(|z2| dot(&w.c_z[z][z2][a], &phi(z)))
                .collect();
            let dist = sigmoid_kernel(&scores);
            for z2 in 0..MED_N {
                p_z[a][z][z2] = dist[z2];
            }
        }
    }
    // independent observations
    let mut p_o = vec![vec![0.0; MED_N]; MED_N];
    for u in 0..MED_N {
        let scores: Vec<f64> = (0..MED_N).map(|o| dot(&w.c_o[u][o], &phi(u))).collect();
        let dist = sigmoid_kernel(&scores);
        p_o[u] = dist;
    }
    // mood chain
    let mut p_mood = vec![vec![vec![0.0; 2]; MED_N]; MED_A]; // [a][u][m']
    for u in 0..MED_N {
        for a in 0..MED_A {
            let scores: Vec<f64> = (0..2)
                .map(|m2| dot(&w.c_mood[u][a][m2], &phi(u)))
                .collect();
            let dist = sigmoid_kernel(&scores);
            p_mood[a][u] = dist;
        }
    }
    // look chain, conditioned on the already-sampled next observed state
    let mut p_look = vec![vec![vec![0.0; 2]; 2]; MED_N]; // [z'][look][look']
    for z2 in 0..MED_N {
        for look in 0..2 {
            let mut feats = vec![look as f64, 1.0];
            feats.extend_from_slice(&phi(z2));
            let scores: Vec<f64> = (0..2)
                .map(|l2| dot(&w.c_look[z2][look][l2], &feats))
                .collect();
            let dist = sigmoid_kernel(&scores);
            p_look[z2][look] = dist;
        }
    }

    // joint transition over (z, u) with u = mood * 2 + look
    let n_s = MED_N * MED_N;
    let joint = |z: usize, u: usize| z * MED_N + u;
    let mut transition = vec![vec![vec![0.0; n_s]; n_s]; MED_A];
    for a in 0..MED_A {
        for z in 0..MED_N {
            for u in 0..MED_N {
                let (mood, look) = (u / 2, u % 2);
                let _ = mood;
                for z2 in 0..MED_N {
                    for m2 in 0..2 {
                        for l2 in 0..2 {
                            let u2 = m2 * 2 + l2;
                            transition[a][joint(z, u)][joint(z2, u2)] = p_z[a][z][z2]
                                * p_mood[a][u][m2]
                                * p_look[z2][look][l2];
                        }
                    }
                }
            }
        }
    }

    // reward: nearest point of the 8-value uniform grid
    let reward_values: Vec<f64> = (0..MED_REWARDS)
        .map(|i| i as f64 / (MED_REWARDS - 1) as f64)
        .collect();
    let mut reward = vec![vec![vec![0; MED_A]; MED_N]; MED_N]; // [u][z][a]
    for u in 0..MED_N {
        for z in 0..MED_N {
            for a in 0..MED_A {
                let score = sigmoid(
                    (1.0 - alpha) * dot(&w.c_r_z[z][a], &phi(z))
                        + alpha * dot(&w.c_r_u[u][a], &phi(u)),
                );
                let idx = (score * (MED_REWARDS - 1) as f64).round() as usize;
                reward[u][z][a] = idx.min(MED_REWARDS - 1);
            }
        }
    }

    // behavior policy
    let mut pib = vec![vec![0.0; MED_A]; n_s];
    for z in 0..MED_N {
        for u in 0..MED_N {
            let scores: Vec<f64> = (0..MED_A)
                .map(|a| {
                    (1.0 - alpha) * dot(&w.c_b_z[z][a], &phi(z))
                        + alpha * dot(&w.c_b_u[u][a], &phi(u))
                })
                .collect();
            pib[joint(z, u)] = sigmoid_kernel(&scores);
        }
    }

    // initial joint: run the behavior chain two virtual steps from a uniform
    // joint state; the first step correlates the observed and hidden chains
    // so that z_pre stays informative about u0 even at alpha = 0.
    let mut warm = vec![1.0 / n_s as f64; n_s];
    let mut pushed = vec![0.0; n_s];
    for (s, &w) in warm.iter().enumerate() {
        for (a, &pa) in pib[s].iter().enumerate() {
            for s2 in 0..n_s {
                pushed[s2] += w * pa * transition[a][s][s2];
            }
        }
    }
    warm = pushed;
    let mut init = vec![0.0; MED_N * MED_N * MED_N];
    for z_pre in 0..MED_N {
        for u_pre in 0..MED_N {
            let w = warm[joint(z_pre, u_pre)];
            if w == 0.0 {
                continue;
            }
            for (a, &pa) in pib[joint(z_pre, u_pre)].iter().enumerate() {
                for z0 in 0..MED_N {
                    for u0 in 0..MED_N {
                        init[(z_pre * MED_N + z0) * MED_N + u0] +=
                            w * pa * transition[a][joint(z_pre, u_pre)][joint(z0, u0)];
                    }
                }
            }
        }
    }

    let model = TabularDpomdp {
        spaces: SpaceSpec {
            n_u: MED_N,
            n_z: MED_N,
            n_a: MED_A,
            n_o: Some(MED_N),
            reward_values,
        },
        transition,
        independent_observation: p_o,
        reward,
        gamma: 0.9,
        init,
    };
    let behavior = BehaviorPolicy::stationary(ModelKind::Dpomdp, pib, cfg.horizon);
    Ok((model, behavior))
}

/// Memoryless evaluation policy over `(z, o)` with sigmoid-scored weights
/// from the configuration's evaluation seed stream; deterministic per seed.
pub fn medical_eval_policy(cfg: &MedicalConfig) -> Result<EvaluationPolicy> {
    cfg.check()?;
    let mut s = NormalStream::new(cfg.seed, 1);
    let c_e: Vec<Vec<f64>> = (0..MED_A).map(|_| s.vector(5)).collect();
    let mut table = vec![vec![0.0; MED_A]; MED_N * MED_N];
    for z in 0..MED_N {
        for o in 0..MED_N {
            let zb = bits(z);
            let ob = bits(o);
            let feats = [zb[0], zb[1], ob[0], ob[1], 1.0];
            let scores: Vec<f64> = (0..MED_A).map(|a| dot(&c_e[a], &feats)).collect();
            table[z * MED_N + o] = sigmoid_kernel(&scores);
        }
    }
    Ok(EvaluationPolicy::Memoryless(MemorylessPolicy::stationary(
        ModelKind::Dpomdp,
        table,
        cfg.horizon,
    )))
}

// ---------------------------------------------------------------------------
// sufficiency control environment
// ---------------------------------------------------------------------------

/// A POMDP on which observable-history importance sampling is unbiased:
/// the hidden state is a deterministic function of the current observation
/// (z in {0,1} maps to u=0, z in {2,3} maps to u=1), so the observable
/// trajectory determines rewards and next-observation distributions.
pub fn is_sufficient_env(
    seed: u64,
    horizon: usize,
) -> (TabularPomdp, BehaviorPolicy, EvaluationPolicy) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_u = 2;
    let n_z = 4;
    let n_a = 2;
    let observation = vec![vec![0.6, 0.4, 0.0, 0.0], vec![0.0, 0.0, 0.3, 0.7]];
    let transition: Vec<Vec<Vec<f64>>> = (0..n_a)
        .map(|_| (0..n_u).map(|_| dirichlet(&mut rng, n_u)).collect())
        .collect();
    let reward_values = vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    let reward: Vec<Vec<usize>> = (0..n_u)
        .map(|_| (0..n_a).map(|_| rng.random_range(0..4)).collect())
        .collect();
    let init = dirichlet(&mut rng, n_u);
    let model = TabularPomdp {
        spaces: SpaceSpec {
            n_u,
            n_z,
            n_a,
            n_o: None,
            reward_values,
        },
        transition,
        pre_observation: observation.clone(),
        observation,
        reward,
        gamma: 0.9,
        init,
    };
    let pib: Vec<Vec<f64>> = (0..n_u).map(|_| dirichlet(&mut rng, n_a)).collect();
    let behavior = BehaviorPolicy::stationary(ModelKind::Pomdp, pib, horizon);
    let pie: Vec<Vec<f64>> = (0..n_z).map(|_| dirichlet(&mut rng, n_a)).collect();
    let eval = EvaluationPolicy::Memoryless(MemorylessPolicy::stationary(
        ModelKind::Pomdp,
        pie,
        horizon,
    ));
    (model, behavior, eval)
}

// ---------------------------------------------------------------------------
// random model generators with certified invertibility
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RandomModelSpec {
    pub n_u: usize,
    pub n_z: usize,
    pub n_a: usize,
    /// Only decoupled generators read this.
    pub n_o: usize,
    pub horizon: usize,
    pub n_rewards: usize,
    pub gamma: f64,
}

impl RandomModelSpec {
    pub fn pomdp(n_u: usize, n_z: usize, n_a: usize, horizon: usize) -> Self {
        RandomModelSpec {
            n_u,
            n_z,
            n_a,
            n_o: 0,
            horizon,
            n_rewards: 4,
            gamma: 0.9,
        }
    }

    pub fn dpomdp(n_u: usize, n_z: usize, n_o: usize, n_a: usize, horizon: usize) -> Self {
        RandomModelSpec {
            n_u,
            n_z,
            n_a,
            n_o,
            horizon,
            n_rewards: 4,
            gamma: 0.9,
        }
    }

    fn reward_values(&self) -> Vec<f64> {
        (0..self.n_rewards)
            .map(|i| i as f64 / (self.n_rewards - 1).max(1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct CertifiedPomdp {
    pub model: TabularPomdp,
    pub behavior: BehaviorPolicy,
    /// Worst condition number among the certified matrices.
    pub worst_condition: f64,
}

#[derive(Debug, Clone)]
pub struct CertifiedDpomdp {
    pub model: TabularDpomdp,
    pub behavior: BehaviorPolicy,
    pub worst_condition: f64,
    pub index_sets: IndexSets,
}

fn dirichlet(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Dirichlet(1, ..., 1) via normalized unit exponentials
    let mut draws: Vec<f64> = (0..n)
        .map(|_| -ln(1.0 - rng.random::<f64>()))
        .collect();
    let sum: f64 = draws.iter().sum();
    for d in draws.iter_mut() {
        *d /= sum;
    }
    draws
}

/// Worst condition number of the invertible proxy blocks of a POMDP over
/// steps `0..=horizon` and all actions; singular blocks count as infinite.
pub fn certify_pomdp_invertibility(
    model: &TabularPomdp,
    behavior: &BehaviorPolicy,
    horizon: usize,
) -> Result<f64> {
    let mref = ModelRef::Pomdp(model);
    let mut worst: f64 = 0.0;
    for t in 0..=horizon {
        for a in 0..model.spaces.n_a {
            let m =
                crate::oracle::population_matrix(mref, behavior, &MatrixDescriptor::PZGivenAZprev { t, a })?;
            let c = m.condition_number;
            worst = worst.max(if c.is_finite() { c } else { f64::INFINITY });
        }
    }
    Ok(worst)
}

/// Worst condition number of the selected `(K, J)` blocks of a decoupled
/// model, together with the selected index sets; singular blocks count as
/// infinite.
pub fn certify_dpomdp_invertibility(
    model: &TabularDpomdp,
    behavior: &BehaviorPolicy,
    horizon: usize,
) -> Result<(f64, IndexSets)> {
    let mref = ModelRef::Dpomdp(model);
    let source = MatrixSource::Population {
        model: mref,
        behavior,
    };
    let sets = match select_index_sets(&source, horizon) {
        Ok(sets) => sets,
        Err(Error::SingularMatrix { .. }) => {
            return Ok((f64::INFINITY, IndexSets::full(model.spaces.n_u, horizon)))
        }
        Err(e) => return Err(e),
    };
    let mut worst: f64 = 0.0;
    for t in 0..=horizon {
        for z in 0..model.spaces.n_z {
            for a in 0..model.spaces.n_a {
                let full = source.matrix(&MatrixDescriptor::POGivenZAZprev { t, z, a })?;
                if full.has_nan() {
                    continue; // unreachable context
                }
                let sub = full.submatrix(&sets.k[t], &sets.j[t]);
                let c = sub.condition_number;
                worst = worst.max(if c.is_finite() { c } else { f64::INFINITY });
            }
        }
    }
    Ok((worst, sets))
}

/// Dirichlet-sampled POMDP, resampled until every proxy block under a
/// simultaneously sampled behavior policy meets the condition cap. The
/// pre-observation kernel defaults to the observation table.
pub fn random_pomdp(
    seed: u64,
    spec: &RandomModelSpec,
    condition_cap: f64,
    max_tries: u32,
) -> Result<CertifiedPomdp> {
    if spec.n_z < spec.n_u {
        return Err(Error::InvalidParameter(format!(
            "need n_z ({}) >= n_u ({})",
            spec.n_z, spec.n_u
        )));
    }
    let mut best = f64::INFINITY;
    for attempt in 0..max_tries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt as u64);
        let transition: Vec<Vec<Vec<f64>>> = (0..spec.n_a)
            .map(|_| (0..spec.n_u).map(|_| dirichlet(&mut rng, spec.n_u)).collect())
            .collect();
        let observation: Vec<Vec<f64>> = (0..spec.n_u)
            .map(|_| dirichlet(&mut rng, spec.n_z))
            .collect();
        let reward: Vec<Vec<usize>> = (0..spec.n_u)
            .map(|_| {
                (0..spec.n_a)
                    .map(|_| rng.random_range(0..spec.n_rewards))
                    .collect()
            })
            .collect();
        let init = dirichlet(&mut rng, spec.n_u);
        let model = TabularPomdp {
            spaces: SpaceSpec {
                n_u: spec.n_u,
                n_z: spec.n_z,
                n_a: spec.n_a,
                n_o: None,
                reward_values: spec.reward_values(),
            },
            transition,
            pre_observation: observation.clone(),
            observation,
            reward,
            gamma: spec.gamma,
            init,
        };
        let pib: Vec<Vec<f64>> = (0..spec.n_u)
            .map(|_| dirichlet(&mut rng, spec.n_a))
            .collect();
        let behavior = BehaviorPolicy::stationary(ModelKind::Pomdp, pib, spec.horizon);
        match certify_pomdp_invertibility(&model, &behavior, spec.horizon) {
            Ok(worst) if worst <= condition_cap => {
                return Ok(CertifiedPomdp {
                    model,
                    behavior,
                    worst_condition: worst,
                });
            }
            Ok(worst) => best = best.min(worst),
            Err(_) => {}
        }
    }
    Err(Error::MaxTriesExceeded {
        tries: max_tries,
        best_condition: best,
    })
}

/// Dirichlet-sampled decoupled POMDP with certified invertibility of the
/// selected `(K, J)` blocks.
pub fn random_dpomdp(
    seed: u64,
    spec: &RandomModelSpec,
    condition_cap: f64,
    max_tries: u32,
) -> Result<CertifiedDpomdp> {
    if spec.n_z < spec.n_u || spec.n_o < spec.n_u {
        return Err(Error::InvalidParameter(format!(
            "need n_z ({}) and n_o ({}) >= n_u ({})",
            spec.n_z, spec.n_o, spec.n_u
        )));
    }
    let n_s = spec.n_z * spec.n_u;
    let mut best = f64::INFINITY;
    for attempt in 0..max_tries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt as u64);
        let transition: Vec<Vec<Vec<f64>>> = (0..spec.n_a)
            .map(|_| (0..n_s).map(|_| dirichlet(&mut rng, n_s)).collect())
            .collect();
        let independent_observation: Vec<Vec<f64>> = (0..spec.n_u)
            .map(|_| dirichlet(&mut rng, spec.n_o))
            .collect();
        let reward: Vec<Vec<Vec<usize>>> = (0..spec.n_u)
            .map(|_| {
                (0..spec.n_z)
                    .map(|_| {
                        (0..spec.n_a)
                            .map(|_| rng.random_range(0..spec.n_rewards))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let init = dirichlet(&mut rng, spec.n_z * n_s);
        let model = TabularDpomdp {
            spaces: SpaceSpec {
                n_u: spec.n_u,
                n_z: spec.n_z,
                n_a: spec.n_a,
                n_o: Some(spec.n_o),
                reward_values: spec.reward_values(),
            },
            transition,
            independent_observation,
            reward,
            gamma: spec.gamma,
            init,
        };
        let pib: Vec<Vec<f64>> = (0..n_s).map(|_| dirichlet(&mut rng, spec.n_a)).collect();
        let behavior = BehaviorPolicy::stationary(ModelKind::Dpomdp, pib, spec.horizon);
        match certify_dpomdp_invertibility(&model, &behavior, spec.horizon) {
            Ok((worst, sets)) if worst <= condition_cap => {
                return Ok(CertifiedDpomdp {
                    model,
                    behavior,
                    worst_condition: worst,
                    index_sets: sets,
                });
            }
            Ok((worst, _)) => best = best.min(worst),
            Err(_) => {}
        }
    }
    Err(Error::MaxTriesExceeded {
        tries: max_tries,
        best_condition: best,
    })
}

/// Seeded random memoryless evaluation policy (Dirichlet action rows).
pub fn random_memoryless_policy(
    seed: u64,
    kind: ModelKind,
    spaces: &SpaceSpec,
    horizon: usize,
) -> MemorylessPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xE7A1);
    let n_ctx = match kind {
        ModelKind::Pomdp => spaces.n_z,
        ModelKind::Dpomdp => spaces.n_z * spaces.n_o.unwrap_or(1),
    };
    let table: Vec<Vec<f64>> = (0..n_ctx)
        .map(|_| dirichlet(&mut rng, spaces.n_a))
        .collect();
    MemorylessPolicy::stationary(kind, table, horizon)
}
