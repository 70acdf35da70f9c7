//! Off-policy estimators.
//!
//! The proxy estimators reweight behavior-measure conditional matrices into
//! evaluation-policy reward distributions through chained inverse products:
//! no hidden-state quantities appear anywhere. The importance-sampling
//! baselines reweight logged returns by action-probability ratios and are
//! biased under confounding unless the sufficiency condition holds.


use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{
    BehaviorPolicy, EvaluationPolicy, MemorylessPolicy, ModelKind, ModelRef, ObsHistory,
};
use crate::probtables::{
    behavior_action_probs, solve_weights, ActionProbTable, CondProbMatrix, ContextMode,
    IndexSets, MatrixDescriptor, MatrixSource,
};
use crate::simulate::Dataset;

/// Tuning knobs shared by the estimators.
#[derive(Debug, Clone)]
pub struct EstimatorOptions {
    /// Condition-number gate for inverse chains at `ridge = 0`.
    pub condition_cap: f64,
    /// Ridge regularization for the linear solves.
    pub ridge: f64,
    /// Term budget for explicit history enumeration.
    pub budget: u64,
    /// Post-hoc renormalization of per-step distributions (plotting aid);
    /// raw linear-algebra output is reported when off.
    pub renormalize: bool,
    /// Per-step importance-weight cap; off by default.
    pub clip_weight: Option<f64>,
    /// Minimum context count for empirical behavior action probabilities.
    pub min_context_count: u64,
    /// Force the explicit-enumeration path even for memoryless policies
    /// (used to cross-check the dynamic program).
    pub force_enumeration: bool,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            condition_cap: 1e8,
            ridge: 0.0,
            budget: crate::oracle::DEFAULT_TERM_BUDGET,
            renormalize: false,
            clip_weight: None,
            min_context_count: 5,
            force_enumeration: false,
        }
    }
}

/// Per-step estimated reward distribution. Entries may fall outside [0, 1]
/// for empirical inputs; `residual` is `|sum - 1|`.
#[derive(Debug, Clone)]
pub struct StepEstimate {
    pub t: usize,
    pub probs: Vec<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EstimateDiagnostics {
    /// Worst condition number among solved matrices.
    pub worst_condition: f64,
    /// Count of NaN-marked conditioning contexts skipped.
    pub dropped_contexts: usize,
    /// Index sets used (decoupled estimator).
    pub index_sets: Option<IndexSets>,
    /// Importance-weight clip events.
    pub clip_events: usize,
    /// Records dropped by the context count threshold (IS).
    pub excluded_records: usize,
    /// Context mode used for empirical behavior action probabilities (IS).
    pub context_mode: Option<ContextMode>,
    /// Sample standard error of the mean (Monte Carlo IS estimators).
    pub stderr: Option<f64>,
}

/// Estimator output: value, per-step reward distributions, diagnostics.
#[derive(Debug, Clone)]
pub struct EstimateRecord {
    pub v_hat: f64,
    pub per_step: Vec<StepEstimate>,
    pub reward_values: Vec<f64>,
    pub diagnostics: EstimateDiagnostics,
}

fn assemble_record(
    mut per_step: Vec<Vec<f64>>,
    gamma: f64,
    reward_values: &[f64],
    renormalize: bool,
    diagnostics: EstimateDiagnostics,
) -> EstimateRecord {
    if renormalize {
        for probs in per_step.iter_mut() {
            for p in probs.iter_mut() {
                *p = p.max(0.0);
            }
            let sum: f64 = probs.iter().sum();
            if sum > 0.0 {
                for p in probs.iter_mut() {
                    *p /= sum;
                }
            }
        }
    }
    let mut v_hat = 0.0;
    let mut g = 1.0;
    let per_step: Vec<StepEstimate> = per_step
        .into_iter()
        .enumerate()
        .map(|(t, probs)| {
            let mean: f64 = probs
                .iter()
                .zip(reward_values)
                .map(|(p, r)| p * r)
                .sum();
            v_hat += g * mean;
            g *= gamma;
            let residual = (probs.iter().sum::<f64>() - 1.0).abs();
            StepEstimate { t, probs, residual }
        })
        .collect();
    EstimateRecord {
        v_hat,
        per_step,
        reward_values: reward_values.to_vec(),
        diagnostics,
    }
}

/// One trajectory's assembled weight-matrix chain with its accumulated
/// product and evaluation-policy probability; dimensions are verified to
/// chain, with the step-0 factor a column vector.
#[derive(Debug, Clone)]
pub struct WeightChain {
    /// Latest step first, matching the product order.
    pub steps: Vec<DMatrix<f64>>,
    pub omega: DMatrix<f64>,
    pub pi_e: f64,
}

impl WeightChain {
    pub fn new(steps: Vec<DMatrix<f64>>, pi_e: f64) -> Result<Self> {
        let last = steps.last().ok_or_else(|| {
            Error::InvalidParameter("weight chain needs at least the step-0 factor".into())
        })?;
        if last.ncols() != 1 {
            return Err(Error::InvalidParameter(
                "step-0 weight factor must be a column vector".into(),
            ));
        }
        for pair in steps.windows(2) {
            if pair[0].ncols() != pair[1].nrows() {
                return Err(Error::InvalidParameter(format!(
                    "weight chain dimension mismatch: {}x{} against {}x{}",
                    pair[0].nrows(),
                    pair[0].ncols(),
                    pair[1].nrows(),
                    pair[1].ncols()
                )));
            }
        }
        if !(0.0..=1.0 + 1e-12).contains(&pi_e) {
            return Err(Error::InvalidParameter(format!(
                "policy product {pi_e} outside [0, 1]"
            )));
        }
        let mut omega = steps[steps.len() - 1].clone();
        for m in steps.iter().rev().skip(1) {
            omega = m * omega;
        }
        Ok(WeightChain { steps, pi_e, omega })
    }
}

// ---------------------------------------------------------------------------
// POMDP proxy estimator
// ---------------------------------------------------------------------------

struct PomdpChain {
    /// `w0[a]`: step-0 column vectors.
    w0: Vec<DVector<f64>>,
    /// `w[i][a][z_prev][a_prev]` for `i >= 1`; `None` marks a dropped
    /// (NaN-conditioned) context.
    w: Vec<Vec<Vec<Vec<Option<DMatrix<f64>>>>>>,
    /// `final_[t][z][a]`: reward-row matrices over `Z_{t-1}` columns.
    final_: Vec<Vec<Vec<Option<DMatrix<f64>>>>>,
    dropped: usize,
    worst_condition: f64,
}

fn finite_or_none(m: &CondProbMatrix) -> Option<DMatrix<f64>> {
    if m.has_nan() {
        None
    } else {
        Some(m.values.clone())
    }
}

fn build_pomdp_chain(
    source: &MatrixSource<'_>,
    horizon: usize,
    opts: &EstimatorOptions,
) -> Result<PomdpChain> {
    let n_z = source.n_z();
    let n_a = source.n_a();
    let mut dropped = 0usize;
    let mut worst: f64 = 0.0;

    let zmarg = source.matrix(&MatrixDescriptor::PZMarginal { t: 0 })?;
    if zmarg.has_nan() {
        return Err(Error::SingularMatrix {
            descriptor: zmarg.descriptor,
            condition: f64::NAN,
        });
    }

    let mut w0 = Vec::with_capacity(n_a);
    for a in 0..n_a {
        let inv = source.matrix(&MatrixDescriptor::PZGivenAZprev { t: 0, a })?;
        let solved = solve_weights(&inv, &zmarg.values, opts.ridge, opts.condition_cap)?;
        if solved.condition.is_finite() {
            worst = worst.max(solved.condition);
        }
        w0.push(DVector::from_column_slice(solved.matrix.column(0).as_slice()));
    }

    let mut w = vec![Vec::new(); horizon + 1];
    for (i, slot) in w.iter_mut().enumerate().take(horizon + 1).skip(1) {
        let mut per_a = Vec::with_capacity(n_a);
        for a in 0..n_a {
            let inv = source.matrix(&MatrixDescriptor::PZGivenAZprev { t: i, a })?;
            let mut per_zp = Vec::with_capacity(n_z);
            for z_prev in 0..n_z {
                let mut per_ap = Vec::with_capacity(n_a);
                for a_prev in 0..n_a {
                    let joint = source.matrix(&MatrixDescriptor::PZzPrevGivenAZprev2 {
                        t: i,
                        z_prev,
                        a_prev,
                    })?;
                    match finite_or_none(&joint) {
                        Some(joint_values) => {
                            let solved = solve_weights(
                                &inv,
                                &joint_values,
                                opts.ridge,
                                opts.condition_cap,
                            )?;
                            if solved.condition.is_finite() {
                                worst = worst.max(solved.condition);
                            }
                            per_ap.push(Some(solved.matrix));
                        }
                        None => {
                            dropped += 1;
                            per_ap.push(None);
                        }
                    }
                }
                per_zp.push(per_ap);
            }
            per_a.push(per_zp);
        }
        *slot = per_a;
    }

    let mut final_ = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let mut per_z = Vec::with_capacity(n_z);
        for z in 0..n_z {
            let mut per_a = Vec::with_capacity(n_a);
            for a in 0..n_a {
                let m = source.matrix(&MatrixDescriptor::PRZGivenAZprev { t, z, a })?;
                match finite_or_none(&m) {
                    Some(values) => per_a.push(Some(values)),
                    None => {
                        dropped += 1;
                        per_a.push(None);
                    }
                }
            }
            per_z.push(per_a);
        }
        final_.push(per_z);
    }

    Ok(PomdpChain {
        w0,
        w,
        final_,
        dropped,
        worst_condition: worst,
    })
}

/// Proxy-based identification of `P^e(r_t)` and the value for plain POMDPs:
/// chained inverse products of behavior conditionals over past/future
/// observations replace the unobservable hidden-state marginals.
///
/// Memoryless policies run a right-to-left dynamic program over
/// `(step, next action)` states; general policies enumerate observable
/// trajectories under the term budget.
pub fn pomdp_proxy_value(
    source: &MatrixSource<'_>,
    eval: &EvaluationPolicy,
    horizon: usize,
    gamma: f64,
    opts: &EstimatorOptions,
) -> Result<EstimateRecord> {
    if source.kind() != ModelKind::Pomdp {
        return Err(Error::KindMismatch {
            expected: ModelKind::Pomdp,
            got: source.kind(),
        });
    }
    let chain = build_pomdp_chain(source, horizon, opts)?;
    let reward_values = source.reward_values();
    let n_r = reward_values.len();

    let per_step = match (eval.memoryless(), opts.force_enumeration) {
        (Some(p), false) => pomdp_dp(&chain, p, source, horizon, n_r)?,
        _ => pomdp_enumeration(&chain, eval, source, horizon, n_r, opts.budget)?,
    };

    Ok(assemble_record(
        per_step,
        gamma,
        reward_values,
        opts.renormalize,
        EstimateDiagnostics {
            worst_condition: chain.worst_condition,
            dropped_contexts: chain.dropped,
            ..Default::default()
        },
    ))
}

fn pomdp_dp(
    chain: &PomdpChain,
    policy: &MemorylessPolicy,
    source: &MatrixSource<'_>,
    horizon: usize,
    n_r: usize,
) -> Result<Vec<Vec<f64>>> {
    let n_z = source.n_z();
    let n_a = source.n_a();
    let mut per_step = Vec::with_capacity(horizon + 1);

    // s[a_i] accumulates W_i(tau) ... W_0(tau) summed over realized
    // (z_{i-1}, a_{i-1}) weighted by the policy.
    let mut s: Vec<DVector<f64>> = chain.w0.clone();
    for t in 0..=horizon {
        // answer at t from the current chain state
        let mut probs = vec![0.0; n_r];
        for z in 0..n_z {
            let pe = policy.action_dist(t, z)?;
            for a in 0..n_a {
                if pe[a] == 0.0 {
                    continue;
                }
                if let Some(f) = &chain.final_[t][z][a] {
                    let contrib = f * &s[a];
                    for r in 0..n_r {
                        probs[r] += pe[a] * contrib[r];
                    }
                }
            }
        }
        per_step.push(probs);
        if t == horizon {
            break;
        }
        // advance: s'[a_{t+1}] = sum_{z_t, a_t} pi_e(a_t | z_t) W_{t+1} s[a_t]
        let mut next = Vec::with_capacity(n_a);
        for a_next in 0..n_a {
            let mut acc = DVector::zeros(n_z);
            for z in 0..n_z {
                let pe = policy.action_dist(t, z)?;
                for a in 0..n_a {
                    if pe[a] == 0.0 {
                        continue;
                    }
                    if let Some(w) = &chain.w[t + 1][a_next][z][a] {
                        acc += w * &s[a] * pe[a];
                    }
                }
            }
            next.push(acc);
        }
        s = next;
    }
    Ok(per_step)
}

fn pomdp_enumeration(
    chain: &PomdpChain,
    eval: &EvaluationPolicy,
    source: &MatrixSource<'_>,
    horizon: usize,
    n_r: usize,
    budget: u64,
) -> Result<Vec<Vec<f64>>> {
    let n_z = source.n_z();
    let n_a = source.n_a();
    let mut required: u128 = 0;
    let mut branch: u128 = 1;
    for _ in 0..=horizon {
        branch = branch.saturating_mul((n_z * n_a) as u128);
        required = required.saturating_add(branch);
    }
    if required > budget as u128 {
        return Err(Error::BudgetExceeded { required, budget });
    }

    let mut per_step = vec![vec![0.0; n_r]; horizon + 1];
    struct Frame {
        z: Vec<usize>,
        a: Vec<usize>,
        pi: f64,
        factors: Vec<DMatrix<f64>>, // latest step first
    }
    let mut stack: Vec<Frame> = vec![Frame {
        z: Vec::new(),
        a: Vec::new(),
        pi: 1.0,
        factors: Vec::new(),
    }];
    while let Some(frame) = stack.pop() {
        let t = frame.z.len(); // next step to realize
        for z in 0..n_z {
            let mut zs = frame.z.clone();
            zs.push(z);
            let hist = ObsHistory {
                z: &zs,
                o: &[],
                a: &frame.a,
            };
            let dist = eval.action_dist(0, t, hist)?;
            for a in 0..n_a {
                if dist[a] == 0.0 {
                    continue;
                }
                // W_t factor for this realized step
                let factor = if t == 0 {
                    Some(DMatrix::from_column_slice(
                        chain.w0[a].len(),
                        1,
                        chain.w0[a].as_slice(),
                    ))
                } else {
                    chain.w[t][a][zs[t - 1]][frame.a[t - 1]].clone()
                };
                let Some(factor) = factor else { continue };
                let mut factors = frame.factors.clone();
                factors.insert(0, factor);
                let wc = WeightChain::new(factors.clone(), frame.pi * dist[a])?;
                if let Some(f) = &chain.final_[t][z][a] {
                    let contrib = f * &wc.omega;
                    for r in 0..n_r {
                        per_step[t][r] += wc.pi_e * contrib[(r, 0)];
                    }
                }
                if t < horizon {
                    let mut a_hist = frame.a.clone();
                    a_hist.push(a);
                    stack.push(Frame {
                        z: zs.clone(),
                        a: a_hist,
                        pi: frame.pi * dist[a],
                        factors,
                    });
                }
            }
        }
    }
    Ok(per_step)
}

// ---------------------------------------------------------------------------
// decoupled proxy estimator
// ---------------------------------------------------------------------------

struct DpomdpChain {
    /// `g0[z0][a0]`: step-0 column vectors in the `j[0]` space.
    g0: Vec<Vec<Option<DVector<f64>>>>,
    /// `g[i][z][a]` maps `(o_prev, z_prev, a_prev)` to the chained factor.
    g: Vec<Vec<Vec<Vec<Vec<Vec<Option<DMatrix<f64>>>>>>>>,
    /// `final_[t][o][z][a]`: reward rows over the `j[t]` column subset.
    final_: Vec<Vec<Vec<Vec<Option<DMatrix<f64>>>>>>,
    sets: IndexSets,
    dropped: usize,
    worst_condition: f64,
}

fn build_dpomdp_chain(
    source: &MatrixSource<'_>,
    horizon: usize,
    sets: IndexSets,
    opts: &EstimatorOptions,
) -> Result<DpomdpChain> {
    let n_z = source.n_z();
    let n_o = source
        .n_o()
        .ok_or_else(|| Error::InvalidParameter("decoupled estimator needs n_o".into()))?;
    let n_a = source.n_a();
    let mut dropped = 0usize;
    let mut worst: f64 = 0.0;
    let all_rows: Vec<usize> = (0..n_o).collect();

    // P(Z_0) for the scalar z0 factor
    let zmarg = source.matrix(&MatrixDescriptor::PZMarginal { t: 0 })?;

    // step-0 vectors
    let mut g0 = Vec::with_capacity(n_z);
    for z0 in 0..n_z {
        let mut per_a = Vec::with_capacity(n_a);
        let po0 = source.matrix(&MatrixDescriptor::POGivenZ0 { z0 })?;
        let pz0 = zmarg.values[(z0, 0)];
        for a0 in 0..n_a {
            let inv_full = source.matrix(&MatrixDescriptor::POGivenZAZprev { t: 0, z: z0, a: a0 })?;
            let inv = inv_full.submatrix(&sets.k[0], &sets.j[0]);
            if inv.has_nan() || po0.has_nan() || pz0.is_nan() {
                dropped += 1;
                per_a.push(None);
                continue;
            }
            let rhs = DMatrix::from_fn(sets.k[0].len(), 1, |r, _| {
                po0.values[(sets.k[0][r], 0)] * pz0
            });
            let solved = solve_weights(&inv, &rhs, opts.ridge, opts.condition_cap)?;
            if solved.condition.is_finite() {
                worst = worst.max(solved.condition);
            }
            per_a.push(Some(DVector::from_column_slice(
                solved.matrix.column(0).as_slice(),
            )));
        }
        g0.push(per_a);
    }

    // chained factors for i >= 1
    let mut g = vec![Vec::new(); horizon + 1];
    for (i, slot) in g.iter_mut().enumerate().take(horizon + 1).skip(1) {
        let mut per_z = Vec::with_capacity(n_z);
        for z in 0..n_z {
            let mut per_a = Vec::with_capacity(n_a);
            for a in 0..n_a {
                let inv_full = source.matrix(&MatrixDescriptor::POGivenZAZprev { t: i, z, a })?;
                let inv = inv_full.submatrix(&sets.k[i], &sets.j[i]);
                let mut per_op = Vec::with_capacity(n_o);
                for o_prev in 0..n_o {
                    let mut per_zp = Vec::with_capacity(n_z);
                    for z_prev in 0..n_z {
                        let mut per_ap = Vec::with_capacity(n_a);
                        for a_prev in 0..n_a {
                            let joint_full =
                                source.matrix(&MatrixDescriptor::POoPrevZGivenZAZprev2 {
                                    t: i,
                                    o_prev,
                                    z,
                                    z_prev,
                                    a_prev,
                                })?;
                            let joint = joint_full.submatrix(&sets.k[i], &sets.j[i - 1]);
                            if inv.has_nan() || joint.has_nan() {
                                dropped += 1;
                                per_ap.push(None);
                                continue;
                            }
                            let solved = solve_weights(
                                &inv,
                                &joint.values,
                                opts.ridge,
                                opts.condition_cap,
                            )?;
                            if solved.condition.is_finite() {
                                worst = worst.max(solved.condition);
                            }
                            per_ap.push(Some(solved.matrix));
                        }
                        per_zp.push(per_ap);
                    }
                    per_op.push(per_zp);
                }
                per_a.push(per_op);
            }
            per_z.push(per_a);
        }
        *slot = per_z;
    }

    // final reward rows; columns subset j[t] (the row space of the chain's
    // leading factor)
    let mut final_ = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let mut per_o = Vec::with_capacity(n_o);
        for o in 0..n_o {
            let mut per_z = Vec::with_capacity(n_z);
            for z in 0..n_z {
                let mut per_a = Vec::with_capacity(n_a);
                for a in 0..n_a {
                    let full = source.matrix(&MatrixDescriptor::PROGivenZAZprev { t, o, z, a })?;
                    let rows: Vec<usize> = (0..full.values.nrows()).collect();
                    let sub = full.submatrix(&rows, &sets.j[t]);
                    match finite_or_none(&sub) {
                        Some(values) => per_a.push(Some(values)),
                        None => {
                            dropped += 1;
                            per_a.push(None);
                        }
                    }
                }
                per_z.push(per_a);
            }
            per_o.push(per_z);
        }
        final_.push(per_o);
    }
    let _ = all_rows;

    Ok(DpomdpChain {
        g0,
        g,
        final_,
        sets,
        dropped,
        worst_condition: worst,
    })
}

/// Proxy-based identification for decoupled POMDPs: as the POMDP estimator,
/// with the independent observations as the future proxy and size-`|U|`
/// index subsets selecting well-conditioned blocks.
pub fn dpomdp_proxy_value(
    source: &MatrixSource<'_>,
    eval: &EvaluationPolicy,
    horizon: usize,
    gamma: f64,
    index_sets: Option<IndexSets>,
    opts: &EstimatorOptions,
) -> Result<EstimateRecord> {
    if source.kind() != ModelKind::Dpomdp {
        return Err(Error::KindMismatch {
            expected: ModelKind::Dpomdp,
            got: source.kind(),
        });
    }
    let n_z = source.n_z();
    let n_o = source
        .n_o()
        .ok_or_else(|| Error::InvalidParameter("decoupled estimator needs n_o".into()))?;
    let sets = match index_sets {
        Some(sets) => {
            let n_u = sets.k.first().map(|k| k.len()).unwrap_or(0);
            sets.validate(n_u, n_z, n_o, horizon)?;
            sets
        }
        None => crate::probtables::select_index_sets(source, horizon)?,
    };
    let chain = build_dpomdp_chain(source, horizon, sets, opts)?;
    let reward_values = source.reward_values();
    let n_r = reward_values.len();

    let per_step = match (eval.memoryless(), opts.force_enumeration) {
        (Some(p), false) => dpomdp_dp(&chain, p, source, horizon, n_r)?,
        _ => dpomdp_enumeration(&chain, eval, source, horizon, n_r, opts.budget)?,
    };

    Ok(assemble_record(
        per_step,
        gamma,
        reward_values,
        opts.renormalize,
        EstimateDiagnostics {
            worst_condition: chain.worst_condition,
            dropped_contexts: chain.dropped,
            index_sets: Some(chain.sets),
            ..Default::default()
        },
    ))
}

fn dpomdp_dp(
    chain: &DpomdpChain,
    policy: &MemorylessPolicy,
    source: &MatrixSource<'_>,
    horizon: usize,
    n_r: usize,
) -> Result<Vec<Vec<f64>>> {
    let n_z = source.n_z();
    let n_o = source.n_o().expect("decoupled source");
    let n_a = source.n_a();
    let mut per_step = Vec::with_capacity(horizon + 1);

    // s[z][a]: chain state per realized (z_i, a_i)
    let mut s: Vec<Vec<Option<DVector<f64>>>> = chain.g0.clone();
    for t in 0..=horizon {
        let mut probs = vec![0.0; n_r];
        for z in 0..n_z {
            for o in 0..n_o {
                let pe = policy.action_dist(t, z * n_o + o)?;
                for a in 0..n_a {
                    if pe[a] == 0.0 {
                        continue;
                    }
                    let (Some(f), Some(vec)) = (&chain.final_[t][o][z][a], &s[z][a]) else {
                        continue;
                    };
                    let contrib = f * vec;
                    for r in 0..n_r {
                        probs[r] += pe[a] * contrib[r];
                    }
                }
            }
        }
        per_step.push(probs);
        if t == horizon {
            break;
        }
        let mut next: Vec<Vec<Option<DVector<f64>>>> = vec![vec![None; n_a]; n_z];
        for z_next in 0..n_z {
            for a_next in 0..n_a {
                let mut acc: Option<DVector<f64>> = None;
                for z in 0..n_z {
                    for o in 0..n_o {
                        let pe = policy.action_dist(t, z * n_o + o)?;
                        for a in 0..n_a {
                            if pe[a] == 0.0 {
                                continue;
                            }
                            let (Some(g), Some(vec)) =
                                (&chain.g[t + 1][z_next][a_next][o][z][a], &s[z][a])
                            else {
                                continue;
                            };
                            let term = g * vec * pe[a];
                            match acc.as_mut() {
                                Some(acc) => *acc += term,
                                None => acc = Some(term),
                            }
                        }
                    }
                }
                next[z_next][a_next] = acc;
            }
        }
        s = next;
    }
    Ok(per_step)
}

fn dpomdp_enumeration(
    chain: &DpomdpChain,
    eval: &EvaluationPolicy,
    source: &MatrixSource<'_>,
    horizon: usize,
    n_r: usize,
    budget: u64,
) -> Result<Vec<Vec<f64>>> {
    let n_z = source.n_z();
    let n_o = source.n_o().expect("decoupled source");
    let n_a = source.n_a();
    let mut required: u128 = 0;
    let mut branch: u128 = 1;
    for _ in 0..=horizon {
        branch = branch.saturating_mul((n_z * n_o * n_a) as u128);
        required = required.saturating_add(branch);
    }
    if required > budget as u128 {
        return Err(Error::BudgetExceeded { required, budget });
    }

    let mut per_step = vec![vec![0.0; n_r]; horizon + 1];
    struct Frame {
        z: Vec<usize>,
        o: Vec<usize>,
        a: Vec<usize>,
        pi: f64,
        factors: Vec<DMatrix<f64>>,
    }
    let mut stack = vec![Frame {
        z: Vec::new(),
        o: Vec::new(),
        a: Vec::new(),
        pi: 1.0,
        factors: Vec::new(),
    }];
    while let Some(frame) = stack.pop() {
        let t = frame.z.len();
        for z in 0..n_z {
            for o in 0..n_o {
                let mut zs = frame.z.clone();
                zs.push(z);
                let mut os = frame.o.clone();
                os.push(o);
                let hist = ObsHistory {
                    z: &zs,
                    o: &os,
                    a: &frame.a,
                };
                let dist = eval.action_dist(n_o, t, hist)?;
                for a in 0..n_a {
                    if dist[a] == 0.0 {
                        continue;
                    }
                    let factor = if t == 0 {
                        chain.g0[z][a].as_ref().map(|v| {
                            DMatrix::from_column_slice(v.len(), 1, v.as_slice())
                        })
                    } else {
                        chain.g[t][z][a][os[t - 1]][zs[t - 1]][frame.a[t - 1]].clone()
                    };
                    let Some(factor) = factor else { continue };
                    let mut factors = frame.factors.clone();
                    factors.insert(0, factor);
                    let wc = WeightChain::new(factors.clone(), frame.pi * dist[a])?;
                    if let Some(f) = &chain.final_[t][o][z][a] {
                        let contrib = f * &wc.omega;
                        for r in 0..n_r {
                            per_step[t][r] += wc.pi_e * contrib[(r, 0)];
                        }
                    }
                    if t < horizon {
                        let mut a_hist = frame.a.clone();
                        a_hist.push(a);
                        stack.push(Frame {
                            z: zs.clone(),
                            o: os.clone(),
                            a: a_hist,
                            pi: frame.pi * dist[a],
                            factors,
                        });
                    }
                }
            }
        }
    }
    Ok(per_step)
}

// ---------------------------------------------------------------------------
// local (single-deviation) proxy estimator
// ---------------------------------------------------------------------------

/// Reward distribution at step `L` of the composite policy that follows the
/// behavior policy before `L` and applies `eval_final` at `L`, identified
/// from behavior conditionals alone.
pub fn local_proxy_reward_dist(
    source: &MatrixSource<'_>,
    eval_final: &MemorylessPolicy,
    horizon: usize,
    opts: &EstimatorOptions,
) -> Result<crate::oracle::RewardDistribution> {
    if source.kind() != ModelKind::Pomdp {
        return Err(Error::KindMismatch {
            expected: ModelKind::Pomdp,
            got: source.kind(),
        });
    }
    let n_z = source.n_z();
    let n_a = source.n_a();
    let reward_values = source.reward_values();
    let n_r = reward_values.len();

    let zmarg = source.matrix(&MatrixDescriptor::PZMarginal { t: horizon })?;
    if zmarg.has_nan() {
        return Err(Error::SingularMatrix {
            descriptor: zmarg.descriptor,
            condition: f64::NAN,
        });
    }
    let mut probs = vec![0.0; n_r];
    for a in 0..n_a {
        let inv = source.matrix(&MatrixDescriptor::PZGivenAZprev { t: horizon, a })?;
        let w_l = solve_weights(&inv, &zmarg.values, opts.ridge, opts.condition_cap)?;
        for z in 0..n_z {
            let pe = eval_final.action_dist(horizon, z)?;
            if pe[a] == 0.0 {
                continue;
            }
            let f = source.matrix(&MatrixDescriptor::PRZGivenAZprev { t: horizon, z, a })?;
            if f.has_nan() {
                continue;
            }
            let contrib = &f.values * w_l.matrix.column(0);
            for r in 0..n_r {
                probs[r] += pe[a] * contrib[r];
            }
        }
    }
    Ok(crate::oracle::RewardDistribution {
        t: horizon,
        probs,
        reward_values: reward_values.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// importance sampling
// ---------------------------------------------------------------------------

fn eval_action_prob(
    eval: &EvaluationPolicy,
    n_o: usize,
    t: usize,
    rec_z: &[usize],
    rec_o: &[usize],
    rec_a: &[usize],
) -> Result<f64> {
    let hist = ObsHistory {
        z: &rec_z[..=t],
        o: if rec_o.is_empty() { &[] } else { &rec_o[..=t] },
        a: &rec_a[..t],
    };
    let dist = eval.action_dist(n_o, t, hist)?;
    Ok(dist[rec_a[t]])
}

/// Naive importance sampling with observable-history weights
/// `pi_e(a | h) / P_hat^b(a | context)`; biased under confounding.
pub fn naive_is_value(
    records: &[crate::model::ObservableRecord],
    shape: &crate::probtables::DatasetShape,
    eval: &EvaluationPolicy,
    gamma: f64,
    mode: ContextMode,
    opts: &EstimatorOptions,
) -> Result<EstimateRecord> {
    if records.is_empty() {
        return Err(Error::EmptyData);
    }
    let table = behavior_action_probs(records, shape.n_a, mode, opts.min_context_count)?;
    naive_is_with_table(records, shape, eval, gamma, &table, opts)
}

/// As [`naive_is_value`] with a caller-supplied behavior-probability table.
pub fn naive_is_with_table(
    records: &[crate::model::ObservableRecord],
    shape: &crate::probtables::DatasetShape,
    eval: &EvaluationPolicy,
    gamma: f64,
    table: &ActionProbTable,
    opts: &EstimatorOptions,
) -> Result<EstimateRecord> {
    if records.is_empty() {
        return Err(Error::EmptyData);
    }
    let horizon = records[0].horizon();
    let n_o = shape.n_o.unwrap_or(0);
    let n_r = shape.reward_values.len();
    let mut per_step = vec![vec![0.0; n_r]; horizon + 1];
    let mut kept = 0usize;
    let mut excluded = 0usize;
    let mut clip_events = 0usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;

    'records: for rec in records {
        let mut weight = 1.0;
        for t in 0..=horizon {
            let key = ActionProbTable::context_key(table.mode, rec, t);
            let stats = match table.lookup(t, &key) {
                Some(stats) if !stats.excluded => stats,
                _ => {
                    excluded += 1;
                    continue 'records;
                }
            };
            let pb = stats.probs[rec.a[t]];
            if pb == 0.0 {
                excluded += 1;
                continue 'records;
            }
            let pe = eval_action_prob(eval, n_o, t, &rec.z, &rec.o, &rec.a)?;
            let mut w = pe / pb;
            if let Some(cap) = opts.clip_weight {
                if w > cap {
                    w = cap;
                    clip_events += 1;
                }
            }
            weight *= w;
        }
        kept += 1;
        for t in 0..=horizon {
            per_step[t][rec.r_idx[t]] += weight;
        }
        let ret = rec.discounted_return(&shape.reward_values, gamma) * weight;
        sum += ret;
        sum_sq += ret * ret;
    }
    if kept == 0 {
        return Err(Error::AllRecordsExcluded);
    }
    for probs in per_step.iter_mut() {
        for p in probs.iter_mut() {
            *p /= kept as f64;
        }
    }
    let mean = sum / kept as f64;
    let var = (sum_sq / kept as f64 - mean * mean).max(0.0);
    let stderr = crate::math::sqrt(var / kept as f64);

    Ok(assemble_record(
        per_step,
        gamma,
        &shape.reward_values,
        opts.renormalize,
        EstimateDiagnostics {
            excluded_records: excluded,
            clip_events,
            context_mode: Some(table.mode),
            stderr: Some(stderr),
            ..Default::default()
        },
    ))
}

/// Exact population value of the naive importance-sampling estimator:
/// the expectation it converges to, computed by observable-history
/// enumeration with exact behavior conditionals.
pub fn naive_is_population_value(
    model: ModelRef<'_>,
    behavior: &BehaviorPolicy,
    eval: &EvaluationPolicy,
    horizon: usize,
    budget: u64,
) -> Result<EstimateRecord> {
    model.ensure_valid()?;
    if behavior.kind != model.kind() {
        return Err(Error::KindMismatch {
            expected: model.kind(),
            got: behavior.kind,
        });
    }
    let spaces = model.spaces();
    let branch = (spaces.n_z * spaces.n_o.unwrap_or(1) * spaces.n_a) as u128;
    let mut required: u128 = 0;
    let mut acc: u128 = 1;
    for _ in 0..=horizon {
        acc = acc.saturating_mul(branch);
        required = required.saturating_add(acc);
    }
    let required = required.saturating_mul(spaces.n_u as u128);
    if required > budget as u128 {
        return Err(Error::BudgetExceeded { required, budget });
    }

    let n_r = spaces.n_rewards();
    let gamma = model.gamma();
    let mut per_step = vec![vec![0.0; n_r]; horizon + 1];

    // DFS over observable histories carrying, per hidden state:
    //   w[u]          joint measure of (history, u_t = u) under behavior
    //   rv[t][r][u]   joint measure restricted to r_t = r for realized steps
    struct Frame {
        z: Vec<usize>,
        o: Vec<usize>,
        a: Vec<usize>,
        w: Vec<f64>,
        rv: Vec<Vec<Vec<f64>>>,
        is_weight: f64,
    }
    let mut stack: Vec<Frame> = Vec::new();
    let n_o = spaces.n_o.unwrap_or(0);

    match model {
        ModelRef::Pomdp(m) => {
            for z0 in 0..spaces.n_z {
                let w: Vec<f64> = (0..spaces.n_u)
                    .map(|u| m.init[u] * m.observation[u][z0])
                    .collect();
                if w.iter().sum::<f64>() > 0.0 {
                    stack.push(Frame {
                        z: vec![z0],
                        o: vec![],
                        a: vec![],
                        w,
                        rv: Vec::new(),
                        is_weight: 1.0,
                    });
                }
            }
        }
        ModelRef::Dpomdp(m) => {
            for z0 in 0..spaces.n_z {
                for o0 in 0..n_o {
                    let w: Vec<f64> = (0..spaces.n_u)
                        .map(|u| {
                            let mass: f64 = (0..spaces.n_z)
                                .map(|zp| m.init[m.init_index(zp, z0, u)])
                                .sum();
                            mass * m.independent_observation[u][o0]
                        })
                        .collect();
                    if w.iter().sum::<f64>() > 0.0 {
                        stack.push(Frame {
                            z: vec![z0],
                            o: vec![o0],
                            a: vec![],
                            w,
                            rv: Vec::new(),
                            is_weight: 1.0,
                        });
                    }
                }
            }
        }
    }

    while let Some(frame) = stack.pop() {
        let t = frame.z.len() - 1;
        let z = frame.z[t];
        let hist_mass: f64 = frame.w.iter().sum();
        let hist = ObsHistory {
            z: &frame.z,
            o: &frame.o,
            a: &frame.a,
        };
        let pe_dist = eval.action_dist(n_o, t, hist)?;
        for a in 0..spaces.n_a {
            // behavior conditional and per-state action kernel
            let mut w_after = vec![0.0; spaces.n_u];
            for (u, &wu) in frame.w.iter().enumerate() {
                if wu == 0.0 {
                    continue;
                }
                let pb = match model {
                    ModelRef::Pomdp(_) => behavior.action_dist(t, u)?[a],
                    ModelRef::Dpomdp(m) => behavior.action_dist(t, m.joint(z, u))?[a],
                };
                w_after[u] = wu * pb;
            }
            let joint_mass: f64 = w_after.iter().sum();
            if joint_mass == 0.0 {
                continue;
            }
            let pb_cond = joint_mass / hist_mass;
            let pe = pe_dist[a];
            if pe == 0.0 {
                continue;
            }
            let is_weight = frame.is_weight * pe / pb_cond;

            // extend reward-value vectors with this step's realized reward
            let mut rv: Vec<Vec<Vec<f64>>> = frame
                .rv
                .iter()
                .map(|per_r| {
                    per_r
                        .iter()
                        .map(|per_u| {
                            per_u
                                .iter()
                                .enumerate()
                                .map(|(u, &v)| {
                                    if frame.w[u] == 0.0 || v == 0.0 {
                                        0.0
                                    } else {
                                        v * w_after[u] / frame.w[u]
                                    }
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let mut this_step = vec![vec![0.0; spaces.n_u]; n_r];
            for (u, &wu) in w_after.iter().enumerate() {
                if wu == 0.0 {
                    continue;
                }
                let ridx = match model {
                    ModelRef::Pomdp(m) => m.reward[u][a],
                    ModelRef::Dpomdp(m) => m.reward[u][z][a],
                };
                this_step[ridx][u] += wu;
            }
            rv.push(this_step);

            if t == horizon {
                for (step, per_r) in rv.iter().enumerate() {
                    for (ridx, per_u) in per_r.iter().enumerate() {
                        let mass: f64 = per_u.iter().sum();
                        per_step[step][ridx] += is_weight * mass;
                    }
                }
                continue;
            }

            // transition hidden states, then branch on the next observation
            match model {
                ModelRef::Pomdp(m) => {
                    let push = |vecs: &[f64]| -> Vec<f64> {
                        let mut out = vec![0.0; spaces.n_u];
                        for (u, &v) in vecs.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            for u2 in 0..spaces.n_u {
                                out[u2] += v * m.transition[a][u][u2];
                            }
                        }
                        out
                    };
                    let w_next = push(&w_after);
                    let rv_next: Vec<Vec<Vec<f64>>> = rv
                        .iter()
                        .map(|per_r| per_r.iter().map(|per_u| push(per_u)).collect())
                        .collect();
                    for z2 in 0..spaces.n_z {
                        let w: Vec<f64> = (0..spaces.n_u)
                            .map(|u| w_next[u] * m.observation[u][z2])
                            .collect();
                        if w.iter().sum::<f64>() == 0.0 {
                            continue;
                        }
                        let rv2: Vec<Vec<Vec<f64>>> = rv_next
                            .iter()
                            .map(|per_r| {
                                per_r
                                    .iter()
                                    .map(|per_u| {
                                        (0..spaces.n_u)
                                            .map(|u| per_u[u] * m.observation[u][z2])
                                            .collect()
                                    })
                                    .collect()
                            })
                            .collect();
                        let mut zh = frame.z.clone();
                        zh.push(z2);
                        let mut ah = frame.a.clone();
                        ah.push(a);
                        stack.push(Frame {
                            z: zh,
                            o: frame.o.clone(),
                            a: ah,
                            w,
                            rv: rv2,
                            is_weight,
                        });
                    }
                }
                ModelRef::Dpomdp(m) => {
                    let push = |vecs: &[f64], z2: usize| -> Vec<f64> {
                        let mut out = vec![0.0; spaces.n_u];
                        for (u, &v) in vecs.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let s = m.joint(z, u);
                            for u2 in 0..spaces.n_u {
                                out[u2] += v * m.transition[a][s][m.joint(z2, u2)];
                            }
                        }
                        out
                    };
                    for z2 in 0..spaces.n_z {
                        let w_next = push(&w_after, z2);
                        if w_next.iter().sum::<f64>() == 0.0 {
                            continue;
                        }
                        for o2 in 0..n_o {
                            let w: Vec<f64> = (0..spaces.n_u)
                                .map(|u| w_next[u] * m.independent_observation[u][o2])
                                .collect();
                            if w.iter().sum::<f64>() == 0.0 {
                                continue;
                            }
                            let rv2: Vec<Vec<Vec<f64>>> = rv
                                .iter()
                                .map(|per_r| {
                                    per_r
                                        .iter()
                                        .map(|per_u| {
                                            let pushed = push(per_u, z2);
                                            (0..spaces.n_u)
                                                .map(|u| {
                                                    pushed[u]
                                                        * m.independent_observation[u][o2]
                                                })
                                                .collect()
                                        })
                                        .collect()
                                })
                                .collect();
                            let mut zh = frame.z.clone();
                            zh.push(z2);
                            let mut oh = frame.o.clone();
                            oh.push(o2);
                            let mut ah = frame.a.clone();
                            ah.push(a);
                            stack.push(Frame {
                                z: zh,
                                o: oh,
                                a: ah,
                                w,
                                rv: rv2,
                                is_weight,
                            });
                        }
                    }
                }
            }
        }
    }

    Ok(assemble_record(
        per_step,
        gamma,
        model.reward_values(),
        false,
        EstimateDiagnostics {
            context_mode: Some(ContextMode::FullHistory),
            ..Default::default()
        },
    ))
}

/// Importance sampling with the true hidden-state behavior probabilities;
/// unbiased, but requires the (normally unavailable) hidden states.
pub fn oracle_is_value(
    dataset: &Dataset,
    eval: &EvaluationPolicy,
    behavior: &BehaviorPolicy,
    gamma: f64,
) -> Result<EstimateRecord> {
    if dataset.records.is_empty() {
        return Err(Error::EmptyData);
    }
    if behavior.kind != dataset.kind {
        return Err(Error::KindMismatch {
            expected: dataset.kind,
            got: behavior.kind,
        });
    }
    let horizon = dataset.horizon;
    let shape = &dataset.shape;
    let n_o = shape.n_o.unwrap_or(0);
    let n_u_stride = shape.n_o.map(|_| 0); // decoupled context needs n_u below
    let _ = n_u_stride;
    let n_r = shape.reward_values.len();
    let mut per_step = vec![vec![0.0; n_r]; horizon + 1];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;

    for traj in &dataset.records {
        let mut weight = 1.0;
        for t in 0..=horizon {
            let pb = match dataset.kind {
                ModelKind::Pomdp => behavior.action_dist(t, traj.u[t])?[traj.a[t]],
                ModelKind::Dpomdp => {
                    // joint context z * n_u + u; n_u recoverable from table width
                    let n_ctx = behavior.steps[t].len();
                    let n_u = n_ctx / shape.n_z;
                    behavior.action_dist(t, traj.z[t] * n_u + traj.u[t])?[traj.a[t]]
                }
            };
            if pb == 0.0 {
                return Err(Error::ZeroProbabilityAction { step: t });
            }
            let pe = eval_action_prob(eval, n_o, t, &traj.z, &traj.o, &traj.a)?;
            weight *= pe / pb;
        }
        for t in 0..=horizon {
            per_step[t][traj.r_idx[t]] += weight;
        }
        let ret = traj
            .to_observable()
            .discounted_return(&shape.reward_values, gamma)
            * weight;
        sum += ret;
        sum_sq += ret * ret;
    }
    let n = dataset.records.len() as f64;
    for probs in per_step.iter_mut() {
        for p in probs.iter_mut() {
            *p /= n;
        }
    }
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    let stderr = crate::math::sqrt(var / n);

    Ok(assemble_record(
        per_step,
        gamma,
        &shape.reward_values,
        false,
        EstimateDiagnostics {
            stderr: Some(stderr),
            ..Default::default()
        },
    ))
}

// ---------------------------------------------------------------------------
// sufficiency check for observable-history importance sampling
// ---------------------------------------------------------------------------

/// Outcome of the importance-sampling sufficiency check: the observable
/// trajectory must determine the return, and next-observation distributions
/// given observable histories must coincide across the two policies.
#[derive(Debug, Clone)]
pub struct SufficiencyReport {
    /// Trajectories sharing an observable projection share the return.
    pub reward_condition: bool,
    /// Max deviation of `P^b(z' | history)` from `P^e(z' | history)` over
    /// reachable histories.
    pub transition_gap: f64,
    pub holds: bool,
}

/// Checks the sufficient condition under which observable-history
/// importance sampling is unbiased. Plain POMDPs only.
pub fn check_is_sufficiency(
    model: ModelRef<'_>,
    behavior: &BehaviorPolicy,
    eval: &EvaluationPolicy,
    horizon: usize,
    budget: u64,
) -> Result<SufficiencyReport> {
    let m = match model {
        ModelRef::Pomdp(m) => m,
        ModelRef::Dpomdp(_) => {
            return Err(Error::InvalidParameter(
                "the sufficiency check applies to plain POMDPs".into(),
            ))
        }
    };
    model.ensure_valid()?;
    let spaces = model.spaces();
    let branch = (spaces.n_z * spaces.n_a) as u128;
    let mut required: u128 = 0;
    let mut acc: u128 = 1;
    for _ in 0..=horizon {
        acc = acc.saturating_mul(branch);
        required = required.saturating_add(acc);
    }
    let required = required.saturating_mul((spaces.n_u * spaces.n_u) as u128);
    if required > budget as u128 {
        return Err(Error::BudgetExceeded { required, budget });
    }

    // Reward condition: along every observable prefix reachable under the
    // behavior measure, track the achievable (hidden state, partial return)
    // pairs; at full horizon they must agree on the return.
    let mut reward_condition = true;
    {
        struct Frame {
            t: usize,
            states: Vec<(usize, f64)>, // (u, discounted return so far)
        }
        let mut stack: Vec<Frame> = Vec::new();
        for z0 in 0..spaces.n_z {
            let states: Vec<(usize, f64)> = (0..spaces.n_u)
                .filter(|&u| m.init[u] > 0.0 && m.observation[u][z0] > 0.0)
                .map(|u| (u, 0.0))
                .collect();
            if !states.is_empty() {
                stack.push(Frame { t: 0, states });
            }
        }
        'outer: while let Some(frame) = stack.pop() {
            for a in 0..spaces.n_a {
                let mut after: Vec<(usize, f64)> = Vec::new();
                let gpow = pow_usize(m.gamma, frame.t);
                for &(u, ret) in &frame.states {
                    if behavior.action_dist(frame.t, u)?[a] == 0.0 {
                        continue;
                    }
                    push_dedup(&mut after, (u, ret + gpow * m.reward_value(u, a)));
                }
                if after.is_empty() {
                    continue;
                }
                if frame.t == horizon {
                    let first = after[0].1;
                    if after.iter().any(|&(_, r)| (r - first).abs() > 1e-12) {
                        reward_condition = false;
                        break 'outer;
                    }
                    continue;
                }
                for z2 in 0..spaces.n_z {
                    let mut next: Vec<(usize, f64)> = Vec::new();
                    for &(u, ret) in &after {
                        for u2 in 0..spaces.n_u {
                            if m.transition[a][u][u2] > 0.0 && m.observation[u2][z2] > 0.0 {
                                push_dedup(&mut next, (u2, ret));
                            }
                        }
                    }
                    if !next.is_empty() {
                        stack.push(Frame {
                            t: frame.t + 1,
                            states: next,
                        });
                    }
                }
            }
        }
    }

    // Transition condition: carry weight vectors under both measures and
    // compare next-observation conditionals wherever both are defined.
    let mut transition_gap: f64 = 0.0;
    {
        struct Frame {
            z: Vec<usize>,
            a: Vec<usize>,
            wb: Vec<f64>,
            we: Vec<f64>,
        }
        let mut stack: Vec<Frame> = Vec::new();
        for z0 in 0..spaces.n_z {
            let w: Vec<f64> = (0..spaces.n_u)
                .map(|u| m.init[u] * m.observation[u][z0])
                .collect();
            if w.iter().sum::<f64>() > 0.0 {
                stack.push(Frame {
                    z: vec![z0],
                    a: vec![],
                    wb: w.clone(),
                    we: w,
                });
            }
        }
        while let Some(frame) = stack.pop() {
            let t = frame.z.len() - 1;
            if t == horizon {
                continue;
            }
            let hist = ObsHistory {
                z: &frame.z,
                o: &[],
                a: &frame.a,
            };
            let pe_dist = eval.action_dist(0, t, hist)?;
            for a in 0..spaces.n_a {
                let mut wb_after = vec![0.0; spaces.n_u];
                let mut we_after = vec![0.0; spaces.n_u];
                for u in 0..spaces.n_u {
                    wb_after[u] = frame.wb[u] * behavior.action_dist(t, u)?[a];
                    we_after[u] = frame.we[u] * pe_dist[a];
                }
                let bmass: f64 = wb_after.iter().sum();
                let emass: f64 = we_after.iter().sum();
                if bmass == 0.0 {
                    continue;
                }
                // next hidden, then compare next-z conditionals
                let mut wb_next = vec![0.0; spaces.n_u];
                let mut we_next = vec![0.0; spaces.n_u];
                for u in 0..spaces.n_u {
                    for u2 in 0..spaces.n_u {
                        wb_next[u2] += wb_after[u] * m.transition[a][u][u2];
                        we_next[u2] += we_after[u] * m.transition[a][u][u2];
                    }
                }
                for z2 in 0..spaces.n_z {
                    let pb: f64 = (0..spaces.n_u)
                        .map(|u2| wb_next[u2] * m.observation[u2][z2])
                        .sum::<f64>()
                        / bmass;
                    if emass > 0.0 {
                        let pe: f64 = (0..spaces.n_u)
                            .map(|u2| we_next[u2] * m.observation[u2][z2])
                            .sum::<f64>()
                            / emass;
                        transition_gap = transition_gap.max((pb - pe).abs());
                    }
                    let wb2: Vec<f64> = (0..spaces.n_u)
                        .map(|u2| wb_next[u2] * m.observation[u2][z2])
                        .collect();
                    let we2: Vec<f64> = (0..spaces.n_u)
                        .map(|u2| we_next[u2] * m.observation[u2][z2])
                        .collect();
                    if wb2.iter().sum::<f64>() > 0.0 {
                        let mut zh = frame.z.clone();
                        zh.push(z2);
                        let mut ah = frame.a.clone();
                        ah.push(a);
                        stack.push(Frame {
                            z: zh,
                            a: ah,
                            wb: wb2,
                            we: we2,
                        });
                    }
                }
            }
        }
    }

    Ok(SufficiencyReport {
        reward_condition,
        transition_gap,
        holds: reward_condition && transition_gap <= 1e-10,
    })
}

fn pow_usize(base: f64, exp: usize) -> f64 {
    let mut out = 1.0;
    for _ in 0..exp {
        out *= base;
    }
    out
}

fn push_dedup(list: &mut Vec<(usize, f64)>, item: (usize, f64)) {
    if !list
        .iter()
        .any(|&(u, r)| u == item.0 && (r - item.1).abs() <= 1e-15)
    {
        list.push(item);
    }
}

