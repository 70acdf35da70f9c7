//! Exact population-level computations from full model knowledge: policy
//! values, per-step interventional reward distributions, behavior-measure
//! conditional-probability matrices, and numeric verification of the
//! factorization identities the estimators rest on.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{
    BehaviorPolicy, EvaluationPolicy, MemorylessPolicy, ModelKind, ModelRef, ObsHistory,
};
use crate::probtables::{CondProbMatrix, MatrixDescriptor};
use crate::simulate;

/// Default cap on (history, hidden-state) enumeration terms.
pub const DEFAULT_TERM_BUDGET: u64 = 100_000_000;

/// Distribution of the reward random variable at a fixed step.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardDistribution {
    pub t: usize,
    /// Aligned with `reward_values`.
    pub probs: Vec<f64>,
    pub reward_values: Vec<f64>,
}

impl RewardDistribution {
    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .zip(&self.reward_values)
            .map(|(p, r)| p * r)
            .sum()
    }

    pub fn total_variation(&self, other: &RewardDistribution) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// Which computation path produced a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMethod {
    /// Linear-cost forward recursion over state marginals.
    MarginalRecursion,
    /// Exponential-cost enumeration over (observable history, hidden state).
    HistoryEnumeration,
}

#[derive(Debug, Clone)]
pub struct ValueResult {
    /// Discounted value over steps `0..=L`.
    pub v: f64,
    pub per_step: Vec<RewardDistribution>,
    pub method: EvalMethod,
}

impl ValueResult {
    fn from_steps(per_step: Vec<RewardDistribution>, gamma: f64, method: EvalMethod) -> Self {
        let mut v = 0.0;
        let mut g = 1.0;
        for dist in &per_step {
            v += g * dist.mean();
            g *= gamma;
        }
        ValueResult { v, per_step, method }
    }
}

/// Either policy class, for [`exact_value`].
#[derive(Debug, Clone, Copy)]
pub enum PolicyRef<'a> {
    Behavior(&'a BehaviorPolicy),
    Evaluation(&'a EvaluationPolicy),
}

impl<'a> From<&'a BehaviorPolicy> for PolicyRef<'a> {
    fn from(p: &'a BehaviorPolicy) -> Self {
        PolicyRef::Behavior(p)
    }
}

impl<'a> From<&'a EvaluationPolicy> for PolicyRef<'a> {
    fn from(p: &'a EvaluationPolicy) -> Self {
        PolicyRef::Evaluation(p)
    }
}

// ---------------------------------------------------------------------------
// forward recursions
// ---------------------------------------------------------------------------

/// Hidden-state marginals `m[t][u]` (POMDP) under the behavior policy.
pub(crate) fn pomdp_hidden_marginals(
    m: &crate::model::TabularPomdp,
    policy: &BehaviorPolicy,
    horizon: usize,
) -> Result<Vec<Vec<f64>>> {
    let n_u = m.spaces.n_u;
    let mut out = Vec::with_capacity(horizon + 1);
    let mut cur = m.init.clone();
    for t in 0..=horizon {
        out.push(cur.clone());
        if t == horizon {
            break;
        }
        let mut next = vec![0.0; n_u];
        for u in 0..n_u {
            if cur[u] == 0.0 {
                continue;
            }
            let dist = policy.action_dist(t, u)?;
            for (a, &pa) in dist.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                for u2 in 0..n_u {
                    next[u2] += cur[u] * pa * m.transition[a][u][u2];
                }
            }
        }
        cur = next;
    }
    Ok(out)
}

/// Joint-state marginals `m[t][z*n_u+u]` (decoupled) under the behavior policy.
pub(crate) fn dpomdp_joint_marginals(
    m: &crate::model::TabularDpomdp,
    policy: &BehaviorPolicy,
    horizon: usize,
) -> Result<Vec<Vec<f64>>> {
    let n_s = m.spaces.joint_states();
    let mut cur = vec![0.0; n_s];
    for z_pre in 0..m.spaces.n_z {
        for z0 in 0..m.spaces.n_z {
            for u0 in 0..m.spaces.n_u {
                cur[m.joint(z0, u0)] += m.init[m.init_index(z_pre, z0, u0)];
            }
        }
    }
    let mut out = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        out.push(cur.clone());
        if t == horizon {
            break;
        }
        let mut next = vec![0.0; n_s];
        for s in 0..n_s {
            if cur[s] == 0.0 {
                continue;
            }
            let dist = policy.action_dist(t, s)?;
            for (a, &pa) in dist.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                for s2 in 0..n_s {
                    next[s2] += cur[s] * pa * m.transition[a][s][s2];
                }
            }
        }
        cur = next;
    }
    Ok(out)
}

fn check_policy_kind(model: ModelKind, policy: ModelKind) -> Result<()> {
    if model == policy {
        Ok(())
    } else {
        Err(Error::KindMismatch {
            expected: model,
            got: policy,
        })
    }
}

// ---------------------------------------------------------------------------
// exact values
// ---------------------------------------------------------------------------

/// Exact `v_L(pi; nu_0)` with per-step reward distributions.
///
/// Behavior policies and memoryless evaluation policies run by marginal
/// recursion (linear in `L`). General evaluation policies enumerate
/// (observable history, hidden state) pairs exactly; the operation refuses
/// when the estimated term count exceeds `budget`.
pub fn exact_value(
    model: ModelRef<'_>,
    policy: PolicyRef<'_>,
    horizon: usize,
    budget: u64,
) -> Result<ValueResult> {
    model.ensure_valid()?;
    match policy {
        PolicyRef::Behavior(b) => {
            check_policy_kind(model.kind(), b.kind)?;
            behavior_value(model, b, horizon)
        }
        PolicyRef::Evaluation(EvaluationPolicy::Memoryless(p)) => {
            check_policy_kind(model.kind(), p.kind)?;
            memoryless_value(model, p, horizon)
        }
        PolicyRef::Evaluation(e @ EvaluationPolicy::General(_)) => {
            general_eval_value(model, e, horizon, budget)
        }
    }
}

/// Exact `P^e(r_t)`; agrees with `exact_value(..).per_step[t]`.
pub fn exact_reward_dist(
    model: ModelRef<'_>,
    policy: &EvaluationPolicy,
    t: usize,
    budget: u64,
) -> Result<RewardDistribution> {
    let result = exact_value(model, PolicyRef::Evaluation(policy), t, budget)?;
    Ok(result.per_step.into_iter().nth(t).expect("step within range"))
}

fn behavior_value(model: ModelRef<'_>, policy: &BehaviorPolicy, horizon: usize) -> Result<ValueResult> {
    let n_r = model.reward_values().len();
    let mut per_step = Vec::with_capacity(horizon + 1);
    match model {
        ModelRef::Pomdp(m) => {
            let marginals = pomdp_hidden_marginals(m, policy, horizon)?;
            for (t, dist) in marginals.iter().enumerate() {
                let mut probs = vec![0.0; n_r];
                for (u, &w) in dist.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let actions = policy.action_dist(t, u)?;
                    for (a, &pa) in actions.iter().enumerate() {
                        probs[m.reward[u][a]] += w * pa;
                    }
                }
                per_step.push(RewardDistribution {
                    t,
                    probs,
                    reward_values: model.reward_values().to_vec(),
                });
            }
        }
        ModelRef::Dpomdp(m) => {
            let marginals = dpomdp_joint_marginals(m, policy, horizon)?;
            for (t, dist) in marginals.iter().enumerate() {
                let mut probs = vec![0.0; n_r];
                for (s, &w) in dist.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let (z, u) = m.split(s);
                    let actions = policy.action_dist(t, s)?;
                    for (a, &pa) in actions.iter().enumerate() {
                        probs[m.reward[u][z][a]] += w * pa;
                    }
                }
                per_step.push(RewardDistribution {
                    t,
                    probs,
                    reward_values: model.reward_values().to_vec(),
                });
            }
        }
    }
    Ok(ValueResult::from_steps(
        per_step,
        model.gamma(),
        EvalMethod::MarginalRecursion,
    ))
}

fn memoryless_value(
    model: ModelRef<'_>,
    policy: &MemorylessPolicy,
    horizon: usize,
) -> Result<ValueResult> {
    let n_r = model.reward_values().len();
    let mut per_step = Vec::with_capacity(horizon + 1);
    match model {
        ModelRef::Pomdp(m) => {
            let n_u = m.spaces.n_u;
            let mut cur = m.init.clone();
            for t in 0..=horizon {
                let mut probs = vec![0.0; n_r];
                let mut next = vec![0.0; n_u];
                for u in 0..n_u {
                    if cur[u] == 0.0 {
                        continue;
                    }
                    for (z, &pz) in m.observation[u].iter().enumerate() {
                        if pz == 0.0 {
                            continue;
                        }
                        let actions = policy.action_dist(t, z)?;
                        for (a, &pa) in actions.iter().enumerate() {
                            let w = cur[u] * pz * pa;
                            if w == 0.0 {
                                continue;
                            }
                            probs[m.reward[u][a]] += w;
                            if t < horizon {
                                for u2 in 0..n_u {
                                    next[u2] += w * m.transition[a][u][u2];
                                }
                            }
                        }
                    }
                }
                per_step.push(RewardDistribution {
                    t,
                    probs,
                    reward_values: model.reward_values().to_vec(),
                });
                cur = next;
            }
        }
        ModelRef::Dpomdp(m) => {
            let n_s = m.spaces.joint_states();
            let n_o = m.n_o();
            let mut cur = vec![0.0; n_s];
            for z_pre in 0..m.spaces.n_z {
                for z0 in 0..m.spaces.n_z {
                    for u0 in 0..m.spaces.n_u {
                        cur[m.joint(z0, u0)] += m.init[m.init_index(z_pre, z0, u0)];
                    }
                }
            }
            for t in 0..=horizon {
                let mut probs = vec![0.0; n_r];
                let mut next = vec![0.0; n_s];
                for s in 0..n_s {
                    if cur[s] == 0.0 {
                        continue;
                    }
                    let (z, u) = m.split(s);
                    for o in 0..n_o {
                        let po = m.independent_observation[u][o];
                        if po == 0.0 {
                            continue;
                        }
                        let actions = policy.action_dist(t, z * n_o + o)?;
                        for (a, &pa) in actions.iter().enumerate() {
                            let w = cur[s] * po * pa;
                            if w == 0.0 {
                                continue;
                            }
                            probs[m.reward[u][z][a]] += w;
                            if t < horizon {
                                for s2 in 0..n_s {
                                    next[s2] += w * m.transition[a][s][s2];
                                }
                            }
                        }
                    }
                }
                per_step.push(RewardDistribution {
                    t,
                    probs,
                    reward_values: model.reward_values().to_vec(),
                });
                cur = next;
            }
        }
    }
    Ok(ValueResult::from_steps(
        per_step,
        model.gamma(),
        EvalMethod::MarginalRecursion,
    ))
}

/// Estimated term count of the general-policy enumeration.
fn enumeration_terms(model: ModelRef<'_>, horizon: usize) -> u128 {
    let s = model.spaces();
    let branch = (s.n_z * s.n_o.unwrap_or(1) * s.n_a) as u128;
    let mut histories: u128 = 1;
    let mut total: u128 = 0;
    for _ in 0..=horizon {
        histories = histories.saturating_mul(branch);
        total = total.saturating_add(histories);
    }
    total.saturating_mul(s.n_u as u128)
}

fn general_eval_value(
    model: ModelRef<'_>,
    policy: &EvaluationPolicy,
    horizon: usize,
    budget: u64,
) -> Result<ValueResult> {
    let required = enumeration_terms(model, horizon);
    if required > budget as u128 {
        return Err(Error::BudgetExceeded { required, budget });
    }
    let n_r = model.reward_values().len();
    let mut per_step = vec![vec![0.0; n_r]; horizon + 1];

    // DFS over observable histories carrying P^e(u_t, history-so-far) vectors.
    struct Frame {
        weights: Vec<f64>, // over hidden states (u, or z*n_u+u with z pinned by history)
        z: Vec<usize>,
        o: Vec<usize>,
        a: Vec<usize>,
    }
    let mut stack: Vec<Frame> = Vec::new();
    match model {
        ModelRef::Pomdp(m) => {
            for z0 in 0..m.spaces.n_z {
                let weights: Vec<f64> = (0..m.spaces.n_u)
                    .map(|u| m.init[u] * m.observation[u][z0])
                    .collect();
                if weights.iter().sum::<f64>() > 0.0 {
                    stack.push(Frame {
                        weights,
                        z: vec![z0],
                        o: vec![],
                        a: vec![],
                    });
                }
            }
            while let Some(frame) = stack.pop() {
                let t = frame.z.len() - 1;
                let dist = policy.action_dist(
                    0,
                    t,
                    ObsHistory {
                        z: &frame.z,
                        o: &frame.o,
                        a: &frame.a,
                    },
                )?;
                for (a, &pa) in dist.iter().enumerate() {
                    if pa == 0.0 {
                        continue;
                    }
                    for (u, &w) in frame.weights.iter().enumerate() {
                        per_step[t][m.reward[u][a]] += w * pa;
                    }
                    if t == horizon {
                        continue;
                    }
                    // advance hidden state, then branch on the next observation
                    let mut pushed = vec![0.0; m.spaces.n_u];
                    for (u, &w) in frame.weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for u2 in 0..m.spaces.n_u {
                            pushed[u2] += w * pa * m.transition[a][u][u2];
                        }
                    }
                    for z2 in 0..m.spaces.n_z {
                        let weights: Vec<f64> = (0..m.spaces.n_u)
                            .map(|u2| pushed[u2] * m.observation[u2][z2])
                            .collect();
                        if weights.iter().sum::<f64>() == 0.0 {
                            continue;
                        }
                        let mut z = frame.z.clone();
                        z.push(z2);
                        let mut a_hist = frame.a.clone();
                        a_hist.push(a);
                        stack.push(Frame {
                            weights,
                            z,
                            o: frame.o.clone(),
                            a: a_hist,
                        });
                    }
                }
            }
        }
        ModelRef::Dpomdp(m) => {
            let n_u = m.spaces.n_u;
            let n_o = m.n_o();
            for z0 in 0..m.spaces.n_z {
                for o0 in 0..n_o {
                    let weights: Vec<f64> = (0..n_u)
                        .map(|u| {
                            let mass: f64 = (0..m.spaces.n_z)
                                .map(|zp| m.init[m.init_index(zp, z0, u)])
                                .sum();
                            mass * m.independent_observation[u][o0]
                        })
                        .collect();
                    if weights.iter().sum::<f64>() > 0.0 {
                        stack.push(Frame {
                            weights,
                            z: vec![z0],
                            o: vec![o0],
                            a: vec![],
                        });
                    }
                }
            }
            while let Some(frame) = stack.pop() {
                let t = frame.z.len() - 1;
                let z = *frame.z.last().expect("non-empty history");
                let dist = policy.action_dist(
                    n_o,
                    t,
                    ObsHistory {
                        z: &frame.z,
                        o: &frame.o,
                        a: &frame.a,
                    },
                )?;
                for (a, &pa) in dist.iter().enumerate() {
                    if pa == 0.0 {
                        continue;
                    }
                    for (u, &w) in frame.weights.iter().enumerate() {
                        per_step[t][m.reward[u][z][a]] += w * pa;
                    }
                    if t == horizon {
                        continue;
                    }
                    let mut pushed = vec![0.0; m.spaces.joint_states()];
                    for (u, &w) in frame.weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let s = m.joint(z, u);
                        for s2 in 0..m.spaces.joint_states() {
                            pushed[s2] += w * pa * m.transition[a][s][s2];
                        }
                    }
                    for z2 in 0..m.spaces.n_z {
                        for o2 in 0..n_o {
                            let weights: Vec<f64> = (0..n_u)
                                .map(|u2| {
                                    pushed[m.joint(z2, u2)]
                                        * m.independent_observation[u2][o2]
                                })
                                .collect();
                            if weights.iter().sum::<f64>() == 0.0 {
                                continue;
                            }
                            let mut zh = frame.z.clone();
                            zh.push(z2);
                            let mut oh = frame.o.clone();
                            oh.push(o2);
                            let mut ah = frame.a.clone();
                            ah.push(a);
                            stack.push(Frame {
                                weights,
                                z: zh,
                                o: oh,
                                a: ah,
                            });
                        }
                    }
                }
            }
        }
    }

    let per_step = per_step
        .into_iter()
        .enumerate()
        .map(|(t, probs)| RewardDistribution {
            t,
            probs,
            reward_values: model.reward_values().to_vec(),
        })
        .collect();
    Ok(ValueResult::from_steps(
        per_step,
        model.gamma(),
        EvalMethod::HistoryEnumeration,
    ))
}

/// Exact reward distribution at the final step of the composite policy that
/// follows the behavior policy before `L` and deviates to a memoryless
/// evaluation table at step `L`.
pub fn exact_final_deviation_dist(
    model: ModelRef<'_>,
    behavior: &BehaviorPolicy,
    eval_final: &MemorylessPolicy,
    horizon: usize,
) -> Result<RewardDistribution> {
    model.ensure_valid()?;
    check_policy_kind(model.kind(), behavior.kind)?;
    check_policy_kind(model.kind(), eval_final.kind)?;
    let n_r = model.reward_values().len();
    let mut probs = vec![0.0; n_r];
    match model {
        ModelRef::Pomdp(m) => {
            let marginals = pomdp_hidden_marginals(m, behavior, horizon)?;
            let last = &marginals[horizon];
            for (u, &w) in last.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (z, &pz) in m.observation[u].iter().enumerate() {
                    if pz == 0.0 {
                        continue;
                    }
                    let actions = eval_final.action_dist(horizon, z)?;
                    for (a, &pa) in actions.iter().enumerate() {
                        probs[m.reward[u][a]] += w * pz * pa;
                    }
                }
            }
        }
        ModelRef::Dpomdp(m) => {
            let marginals = dpomdp_joint_marginals(m, behavior, horizon)?;
            let last = &marginals[horizon];
            let n_o = m.n_o();
            for (s, &w) in last.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let (z, u) = m.split(s);
                for o in 0..n_o {
                    let po = m.independent_observation[u][o];
                    if po == 0.0 {
                        continue;
                    }
                    let actions = eval_final.action_dist(horizon, z * n_o + o)?;
                    for (a, &pa) in actions.iter().enumerate() {
                        probs[m.reward[u][z][a]] += w * po * pa;
                    }
                }
            }
        }
    }
    Ok(RewardDistribution {
        t: horizon,
        probs,
        reward_values: model.reward_values().to_vec(),
    })
}

/// Sample mean and standard error of the discounted return over `n` seeded
/// rollouts of the evaluation policy. Trajectory `i` draws from the stream
/// derived from `(seed, i)`, so results are independent of scheduling.
pub fn monte_carlo_value(
    model: ModelRef<'_>,
    policy: &EvaluationPolicy,
    horizon: usize,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::ZeroSamples);
    }
    model.ensure_valid()?;
    let reward_values = model.reward_values();
    let gamma = model.gamma();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for idx in 0..n {
        let traj = simulate::sample_eval_trajectory(model, policy, horizon, seed, idx as u64)?;
        let ret = traj.to_observable().discounted_return(reward_values, gamma);
        sum += ret;
        sum_sq += ret * ret;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    let stderr = crate::math::sqrt(var / n as f64);
    Ok((mean, stderr))
}

// ---------------------------------------------------------------------------
// window-joint engine and population matrices
// ---------------------------------------------------------------------------

/// A variable of the trajectory process at a fixed step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Var {
    ZPre,
    U(usize),
    Z(usize),
    O(usize),
    A(usize),
    R(usize),
}

impl Var {
    pub(crate) fn time(&self) -> usize {
        match *self {
            Var::ZPre => 0,
            Var::U(t) | Var::Z(t) | Var::O(t) | Var::A(t) | Var::R(t) => t,
        }
    }
}

/// Dense joint distribution over a small set of window variables.
pub(crate) struct JointTable {
    pub vars: Vec<Var>,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl JointTable {
    fn new(vars: Vec<Var>, dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        JointTable {
            vars,
            dims,
            data: vec![0.0; len],
        }
    }

    fn offset(&self, assignment: &[usize]) -> usize {
        let mut idx = 0;
        for (k, &v) in assignment.iter().enumerate() {
            idx = idx * self.dims[k] + v;
        }
        idx
    }

    fn var_pos(&self, var: Var) -> usize {
        self.vars
            .iter()
            .position(|&v| v == var)
            .expect("variable present in window")
    }
}

fn var_dim(model: ModelRef<'_>, var: Var) -> usize {
    let s = model.spaces();
    match var {
        Var::ZPre | Var::Z(_) => s.n_z,
        Var::U(_) => s.n_u,
        Var::O(_) => s.n_o.unwrap_or(0),
        Var::A(_) => s.n_a,
        Var::R(_) => s.n_rewards(),
    }
}

/// Exact joint distribution of the requested variables under the behavior
/// measure, by forward marginals up to the window start and explicit
/// enumeration inside the window.
pub(crate) fn window_joint(
    model: ModelRef<'_>,
    behavior: &BehaviorPolicy,
    vars: &[Var],
) -> Result<JointTable> {
    let has_zpre = vars.iter().any(|v| matches!(v, Var::ZPre));
    let t_max = vars.iter().map(Var::time).max().unwrap_or(0);
    let t_start = if has_zpre {
        0
    } else {
        vars.iter().map(Var::time).min().unwrap_or(0)
    };
    let dims: Vec<usize> = vars.iter().map(|&v| var_dim(model, v)).collect();
    let mut table = JointTable::new(vars.to_vec(), dims);
    let mut assignment = vec![0usize; vars.len()];

    match model {
        ModelRef::Pomdp(m) => {
            let marginals = pomdp_hidden_marginals(m, behavior, t_start)?;
            let start_dist = &marginals[t_start];
            for (u0, &w0) in start_dist.iter().enumerate() {
                if w0 == 0.0 {
                    continue;
                }
                pomdp_enumerate(
                    m,
                    behavior,
                    &mut table,
                    &mut assignment,
                    t_start,
                    t_max,
                    u0,
                    w0,
                    has_zpre,
                )?;
            }
        }
        ModelRef::Dpomdp(m) => {
            if has_zpre {
                // z_pre only exists in the init joint
                for z_pre in 0..m.spaces.n_z {
                    for z0 in 0..m.spaces.n_z {
                        for u0 in 0..m.spaces.n_u {
                            let w = m.init[m.init_index(z_pre, z0, u0)];
                            if w == 0.0 {
                                continue;
                            }
                            if let Some(p) = table.vars.iter().position(|&v| v == Var::ZPre) {
                                assignment[p] = z_pre;
                            }
                            dpomdp_enumerate(
                                m,
                                behavior,
                                &mut table,
                                &mut assignment,
                                0,
                                t_max,
                                m.joint(z0, u0),
                                w,
                            )?;
                        }
                    }
                }
            } else {
                let marginals = dpomdp_joint_marginals(m, behavior, t_start)?;
                for (s0, &w0) in marginals[t_start].iter().enumerate() {
                    if w0 == 0.0 {
                        continue;
                    }
                    dpomdp_enumerate(
                        m,
                        behavior,
                        &mut table,
                        &mut assignment,
                        t_start,
                        t_max,
                        s0,
                        w0,
                    )?;
                }
            }
        }
    }
    Ok(table)
}

#[allow(clippy::too_many_arguments)]
fn pomdp_enumerate(
    m: &crate::model::TabularPomdp,
    behavior: &BehaviorPolicy,
    table: &mut JointTable,
    assignment: &mut [usize],
    t: usize,
    t_max: usize,
    u: usize,
    weight: f64,
    draw_zpre: bool,
) -> Result<()> {
    if draw_zpre {
        debug_assert_eq!(t, 0);
        let pos = table.var_pos(Var::ZPre);
        for (z_pre, &pz) in m.pre_observation[u].iter().enumerate() {
            if pz == 0.0 {
                continue;
            }
            assignment[pos] = z_pre;
            pomdp_enumerate(m, behavior, table, assignment, t, t_max, u, weight * pz, false)?;
        }
        return Ok(());
    }
    if let Some(pos) = table.vars.iter().position(|&v| v == Var::U(t)) {
        assignment[pos] = u;
    }
    let z_pos = table.vars.iter().position(|&v| v == Var::Z(t));
    let a_pos = table.vars.iter().position(|&v| v == Var::A(t));
    let r_pos = table.vars.iter().position(|&v| v == Var::R(t));

    let z_iter: &[f64] = if z_pos.is_some() {
        &m.observation[u]
    } else {
        &[1.0]
    };
    for (z, &pz) in z_iter.iter().enumerate() {
        if pz == 0.0 {
            continue;
        }
        if let Some(p) = z_pos {
            assignment[p] = z;
        }
        let actions = behavior.action_dist(t, u)?;
        for (a, &pa) in actions.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            if let Some(p) = a_pos {
                assignment[p] = a;
            }
            if let Some(p) = r_pos {
                assignment[p] = m.reward[u][a];
            }
            let w = weight * pz * pa;
            if t == t_max {
                let off = table.offset(assignment);
                table.data[off] += w;
            } else {
                for u2 in 0..m.spaces.n_u {
                    let pt = m.transition[a][u][u2];
                    if pt == 0.0 {
                        continue;
                    }
                    pomdp_enumerate(m, behavior, table, assignment, t + 1, t_max, u2, w * pt, false)?;
                }
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn dpomdp_enumerate(
    m: &crate::model::TabularDpomdp,
    behavior: &BehaviorPolicy,
    table: &mut JointTable,
    assignment: &mut [usize],
    t: usize,
    t_max: usize,
    s: usize,
    weight: f64,
) -> Result<()> {
    let (z, u) = m.split(s);
    if let Some(pos) = table.vars.iter().position(|&v| v == Var::U(t)) {
        assignment[pos] = u;
    }
    if let Some(pos) = table.vars.iter().position(|&v| v == Var::Z(t)) {
        assignment[pos] = z;
    }
    let o_pos = table.vars.iter().position(|&v| v == Var::O(t));
    let a_pos = table.vars.iter().position(|&v| v == Var::A(t));
    let r_pos = table.vars.iter().position(|&v| v == Var::R(t));

    let o_iter: &[f64] = if o_pos.is_some() {
        &m.independent_observation[u]
    } else {
        &[1.0]
    };
    for (o, &po) in o_iter.iter().enumerate() {
        if po == 0.0 {
            continue;
        }
        if let Some(p) = o_pos {
            assignment[p] = o;
        }
        let actions = behavior.action_dist(t, s)?;
        for (a, &pa) in actions.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            if let Some(p) = a_pos {
                assignment[p] = a;
            }
            if let Some(p) = r_pos {
                assignment[p] = m.reward[u][z][a];
            }
            let w = weight * po * pa;
            if t == t_max {
                let off = table.offset(assignment);
                table.data[off] += w;
            } else {
                for s2 in 0..m.spaces.joint_states() {
                    let pt = m.transition[a][s][s2];
                    if pt == 0.0 {
                        continue;
                    }
                    dpomdp_enumerate(m, behavior, table, assignment, t + 1, t_max, s2, w * pt)?;
                }
            }
        }
    }
    Ok(())
}

/// Exact behavior-measure conditional-probability matrix for a descriptor.
pub fn population_matrix(
    model: ModelRef<'_>,
    behavior: &BehaviorPolicy,
    descriptor: &MatrixDescriptor,
) -> Result<CondProbMatrix> {
    model.ensure_valid()?;
    check_policy_kind(model.kind(), behavior.kind)?;
    descriptor.check(model.spaces(), model.kind())?;
    let spec = descriptor.window_spec();
    let jt = window_joint(model, behavior, &spec.vars)?;
    // conditioning mass must exclude row-side fixed vars: recompute via a
    // dedicated joint over conditioning variables only.
    let mut matrix = conditional_with_split(
        descriptor.describe(),
        &jt,
        spec.row_var,
        spec.col_var,
        &spec.fixed_target,
        &spec.fixed_cond,
    );
    matrix.condition_number = crate::probtables::spectral_condition(&matrix.values);
    Ok(matrix)
}

/// Like [`conditional_from_joint`] but with an explicit split between fixed
/// target coordinates (numerator only) and fixed conditioning coordinates
/// (numerator and denominator).
fn conditional_with_split(
    descriptor: String,
    jt: &JointTable,
    row_var: Var,
    col_var: Option<Var>,
    fixed_target: &[(Var, usize)],
    fixed_cond: &[(Var, usize)],
) -> CondProbMatrix {
    let n_rows = jt.dims[jt.var_pos(row_var)];
    let n_cols = col_var.map(|v| jt.dims[jt.var_pos(v)]).unwrap_or(1);
    let mut joint = nalgebra::DMatrix::<f64>::zeros(n_rows, n_cols);
    let mut cond_mass = vec![0.0; n_cols];

    let row_pos = jt.var_pos(row_var);
    let col_pos = col_var.map(|v| jt.var_pos(v));
    let tgt: Vec<(usize, usize)> = fixed_target
        .iter()
        .map(|&(v, val)| (jt.var_pos(v), val))
        .collect();
    let cnd: Vec<(usize, usize)> = fixed_cond
        .iter()
        .map(|&(v, val)| (jt.var_pos(v), val))
        .collect();

    let mut coords = vec![0usize; jt.dims.len()];
    for flat in 0..jt.data.len() {
        let w = jt.data[flat];
        if w == 0.0 {
            continue;
        }
        let mut rem = flat;
        for k in (0..jt.dims.len()).rev() {
            coords[k] = rem % jt.dims[k];
            rem /= jt.dims[k];
        }
        if cnd.iter().any(|&(pos, val)| coords[pos] != val) {
            continue;
        }
        let col = col_pos.map(|p| coords[p]).unwrap_or(0);
        cond_mass[col] += w;
        if tgt.iter().any(|&(pos, val)| coords[pos] != val) {
            continue;
        }
        joint[(coords[row_pos], col)] += w;
    }

    let mut values = nalgebra::DMatrix::<f64>::zeros(n_rows, n_cols);
    for c in 0..n_cols {
        if cond_mass[c] <= 0.0 {
            for r in 0..n_rows {
                values[(r, c)] = f64::NAN;
            }
        } else {
            for r in 0..n_rows {
                values[(r, c)] = joint[(r, c)] / cond_mass[c];
            }
        }
    }
    let row_labels = (0..n_rows).map(|r| vec![r]).collect();
    let col_labels = if col_var.is_some() {
        (0..n_cols).map(|c| vec![c]).collect()
    } else {
        vec![vec![]]
    };
    CondProbMatrix::new(descriptor, row_labels, col_labels, values, vec![0; n_cols])
}

// ---------------------------------------------------------------------------
// identity checks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct IdentityCheck {
    pub name: String,
    pub residual: f64,
}

/// Max elementwise residuals of the factorization identities behind the
/// estimators, evaluated on population matrices.
#[derive(Debug, Clone)]
pub struct IdentityReport {
    pub checks: Vec<IdentityCheck>,
    pub max_residual: f64,
}

fn finite_residual(lhs: &nalgebra::DMatrix<f64>, rhs: &nalgebra::DMatrix<f64>) -> f64 {
    let mut res: f64 = 0.0;
    for (a, b) in lhs.iter().zip(rhs.iter()) {
        if a.is_nan() || b.is_nan() {
            continue;
        }
        res = res.max((a - b).abs());
    }
    res
}

/// Verifies, numerically, the matrix identities used in the estimator
/// derivations at step `t >= 1`. Entries with zero-probability conditioning
/// (NaN) are skipped.
pub fn verify_lemma_identities(
    model: ModelRef<'_>,
    behavior: &BehaviorPolicy,
    t: usize,
) -> Result<IdentityReport> {
    if t == 0 {
        return Err(Error::InvalidParameter(
            "identity checks need t >= 1".into(),
        ));
    }
    model.ensure_valid()?;
    check_policy_kind(model.kind(), behavior.kind)?;
    let spaces = model.spaces();
    let mut checks = Vec::new();

    match model.kind() {
        ModelKind::Pomdp => {
            for a_t in 0..spaces.n_a {
                // (ii) P(Z_t | a_t, Z_{t-1}) = P(Z_t | a_t, U_t) P(U_t | a_t, Z_{t-1})
                let lhs =
                    population_matrix(model, behavior, &MatrixDescriptor::PZGivenAZprev { t, a: a_t })?;
                let zu = population_matrix(model, behavior, &MatrixDescriptor::PZGivenAU { t, a: a_t })?;
                let uz =
                    population_matrix(model, behavior, &MatrixDescriptor::PUGivenAZprev { t, a: a_t })?;
                let rhs = &zu.values * &uz.values;
                checks.push(IdentityCheck {
                    name: format!("P(Z_{t}|a={a_t},Z_{}) factorization", t - 1),
                    residual: finite_residual(&lhs.values, &rhs),
                });
                // (i) P(Z_t|a_t,U_t) P(U_t, z_{t-1} | a_{t-1}, Z_{t-2})
                //     = P(Z_t, z_{t-1} | a_{t-1}, Z_{t-2})
                for z_prev in 0..spaces.n_z {
                    for a_prev in 0..spaces.n_a {
                        let mid = population_matrix(
                            model,
                            behavior,
                            &MatrixDescriptor::PUzPrevGivenAZprev2 { t, z_prev, a_prev },
                        )?;
                        let target = population_matrix(
                            model,
                            behavior,
                            &MatrixDescriptor::PZzPrevGivenAZprev2 { t, z_prev, a_prev },
                        )?;
                        let rhs = &zu.values * &mid.values;
                        checks.push(IdentityCheck {
                            name: format!(
                                "P(Z_{t}|a={a_t},U)·P(U,z={z_prev}|a'={a_prev},Z) multiplication"
                            ),
                            residual: finite_residual(&target.values, &rhs),
                        });
                    }
                }
            }
        }
        ModelKind::Dpomdp => {
            let n_o = spaces.n_o.unwrap_or(0);
            for z_t in 0..spaces.n_z {
                for a_t in 0..spaces.n_a {
                    // decoupled factorization of the invertible block
                    let lhs = population_matrix(
                        model,
                        behavior,
                        &MatrixDescriptor::POGivenZAZprev { t, z: z_t, a: a_t },
                    )?;
                    let ou = population_matrix(
                        model,
                        behavior,
                        &MatrixDescriptor::POGivenZAU { t, z: z_t, a: a_t },
                    )?;
                    let uz = population_matrix(
                        model,
                        behavior,
                        &MatrixDescriptor::PUGivenZAZprev { t, z: z_t, a: a_t },
                    )?;
                    let rhs = &ou.values * &uz.values;
                    checks.push(IdentityCheck {
                        name: format!("P(O_{t}|z={z_t},a={a_t},Z) factorization"),
                        residual: finite_residual(&lhs.values, &rhs),
                    });
                    // multiplication identity with X = Z_{t-1}, Y = O_t
                    for o_prev in 0..n_o {
                        for z_prev in 0..spaces.n_z {
                            for a_prev in 0..spaces.n_a {
                                let mid = population_matrix(
                                    model,
                                    behavior,
                                    &MatrixDescriptor::PUzOPrevGivenZAZprev2 {
                                        t,
                                        z: z_t,
                                        o_prev,
                                        z_prev,
                                        a_prev,
                                    },
                                )?;
                                let target = population_matrix(
                                    model,
                                    behavior,
                                    &MatrixDescriptor::POoPrevZGivenZAZprev2 {
                                        t,
                                        o_prev,
                                        z: z_t,
                                        z_prev,
                                        a_prev,
                                    },
                                )?;
                                let rhs = &ou.values * &mid.values;
                                checks.push(IdentityCheck {
                                    name: format!(
                                        "P(O_{t}|z={z_t},a={a_t},U)·P(U,z,o'|..) multiplication"
                                    ),
                                    residual: finite_residual(&target.values, &rhs),
                                });
                            }
                        }
                    }
                }
            }
        }
    }

    let max_residual = checks.iter().map(|c| c.residual).fold(0.0, f64::max);
    Ok(IdentityReport {
        checks,
        max_residual,
    })
}
