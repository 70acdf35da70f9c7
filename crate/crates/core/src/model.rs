//! Tabular model and policy containers.
//!
//! Index conventions used across the crate:
//! - POMDP transition tables are indexed `[a][u][u']`, observations `[u][z]`.
//! - Decoupled joint states flatten as `s = z * n_u + u`; the transition is
//!   indexed `[a][s][s']`.
//! - Decoupled init is a joint over `(z_pre, z0, u0)` flattened as
//!   `z_pre * n_z * n_u + z0 * n_u + u0`.
//! - Embedded observations (after [`embed_dpomdp_as_pomdp`]) flatten as
//!   `z * n_o + o`, which is also the context index of a decoupled
//!   memoryless evaluation policy. Rewards are stored as indices into
//!   `SpaceSpec::reward_values`.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Tolerance for probability-distribution sums.
pub const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Pomdp,
    Dpomdp,
}

/// Space cardinalities plus the declared finite reward support.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceSpec {
    pub n_u: usize,
    pub n_z: usize,
    pub n_a: usize,
    /// Independent-observation count; present only for decoupled models.
    pub n_o: Option<usize>,
    /// Strictly increasing reward values, each in [0, 1].
    pub reward_values: Vec<f64>,
}

impl SpaceSpec {
    pub fn n_rewards(&self) -> usize {
        self.reward_values.len()
    }

    /// Joint state count for decoupled models (`n_z * n_u`).
    pub fn joint_states(&self) -> usize {
        self.n_z * self.n_u
    }

    fn check(&self, report: &mut ValidationReport, needs_o: bool) {
        if self.n_u == 0 || self.n_z == 0 || self.n_a == 0 {
            report.push("spaces", "all space cardinalities must be at least 1");
        }
        match (needs_o, self.n_o) {
            (true, None) => report.push("spaces", "decoupled model requires n_o"),
            (true, Some(0)) => report.push("spaces", "n_o must be at least 1"),
            (false, Some(_)) => report.push("spaces", "plain POMDP must not declare n_o"),
            _ => {}
        }
        if self.reward_values.is_empty() {
            report.push("spaces.reward_values", "reward support must be non-empty");
        }
        for (i, &r) in self.reward_values.iter().enumerate() {
            if !(0.0..=1.0).contains(&r) {
                report.push(
                    "spaces.reward_values",
                    format!("value {r} at position {i} outside [0, 1]"),
                );
            }
            if i > 0 && self.reward_values[i - 1] >= r {
                report.push(
                    "spaces.reward_values",
                    format!("values not strictly increasing at position {i}"),
                );
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

/// Outcome of model validation; an empty report means the model is valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            location: location.into(),
            message: message.into(),
        });
    }

    fn check_dist(&mut self, location: impl Into<String>, dist: &[f64]) {
        let location = location.into();
        let mut sum = 0.0;
        for (i, &p) in dist.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                self.push(location.clone(), format!("entry {i} = {p} outside [0, 1]"));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > PROB_TOL {
            self.push(location, format!("distribution sums to {sum}, not 1"));
        }
    }
}

impl core::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        if self.is_valid() {
            return write!(f, "valid");
        }
        for v in &self.violations {
            writeln!(f, "{}: {}", v.location, v.message)?;
        }
        Ok(())
    }
}

/// Complete generative tables for a plain POMDP.
///
/// The pre-observation kernel realizes the extra observation `z_pre` drawn
/// given `u0`, independent of `z0` and `a0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPomdp {
    pub spaces: SpaceSpec,
    /// `transition[a][u][u']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `observation[u][z]`
    pub observation: Vec<Vec<f64>>,
    /// `pre_observation[u0][z_pre]`
    pub pre_observation: Vec<Vec<f64>>,
    /// `reward[u][a]` as an index into `spaces.reward_values`
    pub reward: Vec<Vec<usize>>,
    pub gamma: f64,
    /// Initial hidden-state distribution `init[u]`.
    pub init: Vec<f64>,
}

impl TabularPomdp {
    pub fn reward_value(&self, u: usize, a: usize) -> f64 {
        self.spaces.reward_values[self.reward[u][a]]
    }
}

/// Complete generative tables for a decoupled POMDP: an observed chain `z`
/// and an unobserved chain `u` coupled per step, with independent
/// observations `o` emitted by `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDpomdp {
    pub spaces: SpaceSpec,
    /// `transition[a][s][s']` with `s = z * n_u + u`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `independent_observation[u][o]`
    pub independent_observation: Vec<Vec<f64>>,
    /// `reward[u][z][a]` as an index into `spaces.reward_values`
    pub reward: Vec<Vec<Vec<usize>>>,
    pub gamma: f64,
    /// Joint init over `(z_pre, z0, u0)`, flattened.
    pub init: Vec<f64>,
}

impl TabularDpomdp {
    pub fn n_o(&self) -> usize {
        self.spaces.n_o.unwrap_or(0)
    }

    pub fn joint(&self, z: usize, u: usize) -> usize {
        z * self.spaces.n_u + u
    }

    pub fn split(&self, s: usize) -> (usize, usize) {
        (s / self.spaces.n_u, s % self.spaces.n_u)
    }

    pub fn init_index(&self, z_pre: usize, z0: usize, u0: usize) -> usize {
        (z_pre * self.spaces.n_z + z0) * self.spaces.n_u + u0
    }

    pub fn reward_value(&self, u: usize, z: usize, a: usize) -> f64 {
        self.spaces.reward_values[self.reward[u][z][a]]
    }
}

/// Borrowed reference to either model kind.
#[derive(Debug, Clone, Copy)]
pub enum ModelRef<'a> {
    Pomdp(&'a TabularPomdp),
    Dpomdp(&'a TabularDpomdp),
}

impl<'a> ModelRef<'a> {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelRef::Pomdp(_) => ModelKind::Pomdp,
            ModelRef::Dpomdp(_) => ModelKind::Dpomdp,
        }
    }

    pub fn spaces(&self) -> &'a SpaceSpec {
        match self {
            ModelRef::Pomdp(m) => &m.spaces,
            ModelRef::Dpomdp(m) => &m.spaces,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            ModelRef::Pomdp(m) => m.gamma,
            ModelRef::Dpomdp(m) => m.gamma,
        }
    }

    pub fn reward_values(&self) -> &'a [f64] {
        &self.spaces().reward_values
    }

    pub fn validate(&self) -> ValidationReport {
        match self {
            ModelRef::Pomdp(m) => validate_pomdp(m),
            ModelRef::Dpomdp(m) => validate_dpomdp(m),
        }
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        if report.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidModel(report))
        }
    }
}

impl<'a> From<&'a TabularPomdp> for ModelRef<'a> {
    fn from(m: &'a TabularPomdp) -> Self {
        ModelRef::Pomdp(m)
    }
}

impl<'a> From<&'a TabularDpomdp> for ModelRef<'a> {
    fn from(m: &'a TabularDpomdp) -> Self {
        ModelRef::Dpomdp(m)
    }
}

/// Lists every violated invariant of a POMDP; empty iff the model is valid.
pub fn validate_pomdp(m: &TabularPomdp) -> ValidationReport {
    let mut report = ValidationReport::default();
    m.spaces.check(&mut report, false);
    if !report.is_valid() {
        return report;
    }
    let (n_u, n_z, n_a) = (m.spaces.n_u, m.spaces.n_z, m.spaces.n_a);
    if m.transition.len() != n_a {
        report.push("transition", "outer dimension must equal n_a");
    }
    for (a, per_u) in m.transition.iter().enumerate() {
        if per_u.len() != n_u {
            report.push(format!("transition[{a}]"), "dimension must equal n_u");
            continue;
        }
        for (u, row) in per_u.iter().enumerate() {
            if row.len() != n_u {
                report.push(format!("transition[{a}][{u}]"), "dimension must equal n_u");
            } else {
                report.check_dist(format!("transition[{a}][{u}]"), row);
            }
        }
    }
    check_rows(&mut report, "observation", &m.observation, n_u, n_z);
    check_rows(&mut report, "pre_observation", &m.pre_observation, n_u, n_z);
    if m.reward.len() != n_u {
        report.push("reward", "dimension must equal n_u");
    } else {
        for (u, row) in m.reward.iter().enumerate() {
            if row.len() != n_a {
                report.push(format!("reward[{u}]"), "dimension must equal n_a");
                continue;
            }
            for (a, &idx) in row.iter().enumerate() {
                if idx >= m.spaces.n_rewards() {
                    report.push(
                        format!("reward[{u}][{a}]"),
                        format!("index {idx} outside reward support"),
                    );
                }
            }
        }
    }
    if !(m.gamma > 0.0 && m.gamma < 1.0) {
        report.push("gamma", format!("{} not strictly inside (0, 1)", m.gamma));
    }
    if m.init.len() != n_u {
        report.push("init", "dimension must equal n_u");
    } else {
        report.check_dist("init", &m.init);
    }
    report
}

fn check_rows(
    report: &mut ValidationReport,
    name: &str,
    table: &[Vec<f64>],
    rows: usize,
    cols: usize,
) {
    if table.len() != rows {
        report.push(name, format!("dimension must be {rows}"));
        return;
    }
    for (i, row) in table.iter().enumerate() {
        if row.len() != cols {
            report.push(format!("{name}[{i}]"), format!("dimension must be {cols}"));
        } else {
            report.check_dist(format!("{name}[{i}]"), row);
        }
    }
}

/// Lists every violated invariant of a decoupled POMDP.
pub fn validate_dpomdp(m: &TabularDpomdp) -> ValidationReport {
    let mut report = ValidationReport::default();
    m.spaces.check(&mut report, true);
    if !report.is_valid() {
        return report;
    }
    let (n_u, n_z, n_a) = (m.spaces.n_u, m.spaces.n_z, m.spaces.n_a);
    let n_o = m.n_o();
    let n_s = n_z * n_u;
    if m.transition.len() != n_a {
        report.push("transition", "outer dimension must equal n_a");
    }
    for (a, per_s) in m.transition.iter().enumerate() {
        if per_s.len() != n_s {
            report.push(format!("transition[{a}]"), "dimension must equal n_z*n_u");
            continue;
        }
        for (s, row) in per_s.iter().enumerate() {
            if row.len() != n_s {
                report.push(format!("transition[{a}][{s}]"), "dimension must equal n_z*n_u");
            } else {
                report.check_dist(format!("transition[{a}][{s}]"), row);
            }
        }
    }
    check_rows(
        &mut report,
        "independent_observation",
        &m.independent_observation,
        n_u,
        n_o,
    );
    if m.reward.len() != n_u {
        report.push("reward", "dimension must equal n_u");
    } else {
        for (u, per_z) in m.reward.iter().enumerate() {
            if per_z.len() != n_z {
                report.push(format!("reward[{u}]"), "dimension must equal n_z");
                continue;
            }
            for (z, row) in per_z.iter().enumerate() {
                if row.len() != n_a {
                    report.push(format!("reward[{u}][{z}]"), "dimension must equal n_a");
                    continue;
                }
                for (a, &idx) in row.iter().enumerate() {
                    if idx >= m.spaces.n_rewards() {
                        report.push(
                            format!("reward[{u}][{z}][{a}]"),
                            format!("index {idx} outside reward support"),
                        );
                    }
                }
            }
        }
    }
    if !(m.gamma > 0.0 && m.gamma < 1.0) {
        report.push("gamma", format!("{} not strictly inside (0, 1)", m.gamma));
    }
    if m.init.len() != n_z * n_z * n_u {
        report.push("init", "dimension must equal n_z*n_z*n_u");
    } else {
        report.check_dist("init", &m.init);
    }
    report
}

/// Behavior policy: time-indexed action tables over hidden contexts.
///
/// POMDP contexts are hidden states `u`; decoupled contexts are joint states
/// `z * n_u + u`.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorPolicy {
    pub kind: ModelKind,
    /// `steps[t][ctx][a]`
    pub steps: Vec<Vec<Vec<f64>>>,
}

impl BehaviorPolicy {
    /// Stationary policy stored by replication over `horizon + 1` steps.
    pub fn stationary(kind: ModelKind, table: Vec<Vec<f64>>, horizon: usize) -> Self {
        BehaviorPolicy {
            kind,
            steps: vec![table; horizon + 1],
        }
    }

    /// Largest step index the policy covers.
    pub fn horizon(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn action_dist(&self, t: usize, ctx: usize) -> Result<&[f64]> {
        let step = self.steps.get(t).ok_or(Error::StepOutOfRange {
            t,
            horizon: self.horizon(),
        })?;
        Ok(&step[ctx])
    }

    pub fn validate(&self, spaces: &SpaceSpec) -> ValidationReport {
        let mut report = ValidationReport::default();
        let n_ctx = match self.kind {
            ModelKind::Pomdp => spaces.n_u,
            ModelKind::Dpomdp => spaces.joint_states(),
        };
        for (t, step) in self.steps.iter().enumerate() {
            if step.len() != n_ctx {
                report.push(format!("steps[{t}]"), format!("dimension must be {n_ctx}"));
                continue;
            }
            for (c, row) in step.iter().enumerate() {
                if row.len() != spaces.n_a {
                    report.push(
                        format!("steps[{t}][{c}]"),
                        format!("dimension must be {}", spaces.n_a),
                    );
                } else {
                    report.check_dist(format!("steps[{t}][{c}]"), row);
                }
            }
        }
        report
    }
}

/// View of an observable history `h_t` handed to evaluation policies:
/// observations up to and including step `t`, actions strictly before `t`.
#[derive(Debug, Clone, Copy)]
pub struct ObsHistory<'a> {
    pub z: &'a [usize],
    /// Empty for plain POMDPs.
    pub o: &'a [usize],
    pub a: &'a [usize],
}

impl<'a> ObsHistory<'a> {
    pub fn step(&self) -> usize {
        self.z.len() - 1
    }

    pub fn last_z(&self) -> usize {
        *self.z.last().expect("history holds at least one observation")
    }

    pub fn last_o(&self) -> usize {
        *self.o.last().expect("decoupled history holds observations")
    }
}

/// History-dependent evaluation policy; implementations must be pure
/// (identical inputs yield identical distributions).
pub trait HistoryPolicy: Send + Sync {
    fn action_dist(&self, t: usize, history: ObsHistory<'_>) -> Vec<f64>;
}

impl<F> HistoryPolicy for F
where
    F: Fn(usize, ObsHistory<'_>) -> Vec<f64> + Send + Sync,
{
    fn action_dist(&self, t: usize, history: ObsHistory<'_>) -> Vec<f64> {
        self(t, history)
    }
}

/// Memoryless evaluation policy: per-step tables over the last observation.
///
/// POMDP contexts are `z`; decoupled contexts are `z * n_o + o`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorylessPolicy {
    pub kind: ModelKind,
    /// `steps[t][ctx][a]`
    pub steps: Vec<Vec<Vec<f64>>>,
}

impl MemorylessPolicy {
    pub fn stationary(kind: ModelKind, table: Vec<Vec<f64>>, horizon: usize) -> Self {
        MemorylessPolicy {
            kind,
            steps: vec![table; horizon + 1],
        }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn action_dist(&self, t: usize, ctx: usize) -> Result<&[f64]> {
        let step = self.steps.get(t).ok_or(Error::StepOutOfRange {
            t,
            horizon: self.horizon(),
        })?;
        Ok(&step[ctx])
    }

    pub fn context_of(&self, n_o: usize, z: usize, o: usize) -> usize {
        match self.kind {
            ModelKind::Pomdp => z,
            ModelKind::Dpomdp => z * n_o + o,
        }
    }

    pub fn validate(&self, spaces: &SpaceSpec) -> ValidationReport {
        let mut report = ValidationReport::default();
        let n_ctx = match self.kind {
            ModelKind::Pomdp => spaces.n_z,
            ModelKind::Dpomdp => spaces.n_z * spaces.n_o.unwrap_or(0),
        };
        for (t, step) in self.steps.iter().enumerate() {
            if step.len() != n_ctx {
                report.push(format!("steps[{t}]"), format!("dimension must be {n_ctx}"));
                continue;
            }
            for (c, row) in step.iter().enumerate() {
                if row.len() != spaces.n_a {
                    report.push(
                        format!("steps[{t}][{c}]"),
                        format!("dimension must be {}", spaces.n_a),
                    );
                } else {
                    report.check_dist(format!("steps[{t}][{c}]"), row);
                }
            }
        }
        report
    }
}

/// Evaluation policy: a memoryless table or a general history-dependent
/// procedure.
pub enum EvaluationPolicy {
    Memoryless(MemorylessPolicy),
    General(Box<dyn HistoryPolicy>),
}

impl EvaluationPolicy {
    pub fn memoryless(&self) -> Option<&MemorylessPolicy> {
        match self {
            EvaluationPolicy::Memoryless(p) => Some(p),
            EvaluationPolicy::General(_) => None,
        }
    }

    /// Action distribution given the observable history through step `t`.
    pub fn action_dist(&self, n_o: usize, t: usize, history: ObsHistory<'_>) -> Result<Vec<f64>> {
        match self {
            EvaluationPolicy::Memoryless(p) => {
                let ctx = p.context_of(
                    n_o,
                    history.last_z(),
                    if history.o.is_empty() { 0 } else { history.last_o() },
                );
                Ok(p.action_dist(t, ctx)?.to_vec())
            }
            EvaluationPolicy::General(p) => Ok(p.action_dist(t, history)),
        }
    }
}

impl From<MemorylessPolicy> for EvaluationPolicy {
    fn from(p: MemorylessPolicy) -> Self {
        EvaluationPolicy::Memoryless(p)
    }
}

impl core::fmt::Debug for EvaluationPolicy {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EvaluationPolicy::Memoryless(p) => f.debug_tuple("Memoryless").field(p).finish(),
            EvaluationPolicy::General(_) => f.write_str("General(..)"),
        }
    }
}

/// A full sampled trajectory including hidden states.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub z_pre: usize,
    pub u: Vec<usize>,
    pub z: Vec<usize>,
    /// Empty for plain POMDPs.
    pub o: Vec<usize>,
    pub a: Vec<usize>,
    /// Reward indices into the model's reward support.
    pub r_idx: Vec<usize>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.a.len() - 1
    }

    /// Projection dropping all hidden states.
    pub fn to_observable(&self) -> ObservableRecord {
        ObservableRecord {
            z_pre: self.z_pre,
            z: self.z.clone(),
            o: self.o.clone(),
            a: self.a.clone(),
            r_idx: self.r_idx.clone(),
        }
    }
}

/// The observable projection of a trajectory: everything except `u`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservableRecord {
    pub z_pre: usize,
    pub z: Vec<usize>,
    pub o: Vec<usize>,
    pub a: Vec<usize>,
    pub r_idx: Vec<usize>,
}

impl ObservableRecord {
    pub fn horizon(&self) -> usize {
        self.a.len() - 1
    }

    /// Discounted return of the logged rewards.
    pub fn discounted_return(&self, reward_values: &[f64], gamma: f64) -> f64 {
        let mut total = 0.0;
        let mut g = 1.0;
        for &idx in &self.r_idx {
            total += g * reward_values[idx];
            g *= gamma;
        }
        total
    }
}

/// Embeds a decoupled POMDP as a plain POMDP with hidden states `(z, u)` and
/// observations `(z, o)`; every policy value is preserved exactly.
///
/// The pre-observation pairs the decoupled `z_pre` with a second,
/// conditionally independent draw from the independent-observation kernel so
/// that the embedded pre-observation stays informative about `u0`.
pub fn embed_dpomdp_as_pomdp(m: &TabularDpomdp) -> Result<TabularPomdp> {
    let report = validate_dpomdp(m);
    if !report.is_valid() {
        return Err(Error::InvalidModel(report));
    }
    let (n_u, n_z, n_a) = (m.spaces.n_u, m.spaces.n_z, m.spaces.n_a);
    let n_o = m.n_o();
    let n_s = n_z * n_u;
    let n_obs = n_z * n_o;

    // observation[(z,u)][(z~,o)] = P_O(o|u) * 1[z~ = z]
    let mut observation = vec![vec![0.0; n_obs]; n_s];
    for z in 0..n_z {
        for u in 0..n_u {
            for o in 0..n_o {
                observation[z * n_u + u][z * n_o + o] = m.independent_observation[u][o];
            }
        }
    }

    // init over (z0, u0): marginal of the joint; pre_observation conditional on it
    let mut init = vec![0.0; n_s];
    for z_pre in 0..n_z {
        for z0 in 0..n_z {
            for u0 in 0..n_u {
                init[z0 * n_u + u0] += m.init[m.init_index(z_pre, z0, u0)];
            }
        }
    }
    let mut pre_observation = vec![vec![0.0; n_obs]; n_s];
    for z0 in 0..n_z {
        for u0 in 0..n_u {
            let s = z0 * n_u + u0;
            if init[s] <= 0.0 {
                // unreachable start; any valid distribution will do
                let unif = 1.0 / n_obs as f64;
                pre_observation[s] = vec![unif; n_obs];
                continue;
            }
            for z_pre in 0..n_z {
                let w = m.init[m.init_index(z_pre, z0, u0)] / init[s];
                for o in 0..n_o {
                    pre_observation[s][z_pre * n_o + o] +=
                        w * m.independent_observation[u0][o];
                }
            }
        }
    }

    let mut reward = vec![vec![0; n_a]; n_s];
    for z in 0..n_z {
        for u in 0..n_u {
            for a in 0..n_a {
                reward[z * n_u + u][a] = m.reward[u][z][a];
            }
        }
    }

    Ok(TabularPomdp {
        spaces: SpaceSpec {
            n_u: n_s,
            n_z: n_obs,
            n_a,
            n_o: None,
            reward_values: m.spaces.reward_values.clone(),
        },
        transition: m.transition.clone(),
        observation,
        pre_observation,
        reward,
        gamma: m.gamma,
        init,
    })
}

/// Lifts a decoupled behavior policy onto the embedded POMDP's hidden states.
pub fn embed_behavior_policy(p: &BehaviorPolicy) -> Result<BehaviorPolicy> {
    if p.kind != ModelKind::Dpomdp {
        return Err(Error::KindMismatch {
            expected: ModelKind::Dpomdp,
            got: p.kind,
        });
    }
    Ok(BehaviorPolicy {
        kind: ModelKind::Pomdp,
        steps: p.steps.clone(),
    })
}

/// Lifts a decoupled memoryless evaluation policy onto the embedded POMDP's
/// observation space; the `z * n_o + o` context index carries over verbatim.
pub fn embed_eval_policy(p: &MemorylessPolicy) -> Result<MemorylessPolicy> {
    if p.kind != ModelKind::Dpomdp {
        return Err(Error::KindMismatch {
            expected: ModelKind::Dpomdp,
            got: p.kind,
        });
    }
    Ok(MemorylessPolicy {
        kind: ModelKind::Pomdp,
        steps: p.steps.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_pomdp() -> TabularPomdp {
        // 2 states, uniform transitions, identity observation, r in {0, 1}
        let obs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        TabularPomdp {
            spaces: SpaceSpec {
                n_u: 2,
                n_z: 2,
                n_a: 2,
                n_o: None,
                reward_values: vec![0.0, 1.0],
            },
            transition: vec![vec![vec![0.5, 0.5]; 2]; 2],
            observation: obs.clone(),
            pre_observation: obs,
            reward: vec![vec![0, 1], vec![1, 0]],
            gamma: 0.9,
            init: vec![0.5, 0.5],
        }
    }

    #[test]
    fn uniform_identity_model_is_valid() {
        assert!(validate_pomdp(&tiny_pomdp()).is_valid());
    }

    #[test]
    fn bad_transition_row_is_reported_with_location() {
        let mut m = tiny_pomdp();
        m.transition[1][0] = vec![0.5, 0.4];
        let report = validate_pomdp(&m);
        assert!(!report.is_valid());
        assert!(report
            .violations
            .iter()
            .any(|v| v.location == "transition[1][0]"));
    }

    #[test]
    fn reward_index_out_of_support_is_reported() {
        let mut m = tiny_pomdp();
        m.reward[0][1] = 7;
        assert!(!validate_pomdp(&m).is_valid());
    }

    #[test]
    fn projection_drops_hidden_states_and_keeps_order() {
        let tr = Trajectory {
            z_pre: 1,
            u: vec![0, 1, 0],
            z: vec![1, 0, 1],
            o: vec![],
            a: vec![0, 1, 1],
            r_idx: vec![1, 0, 1],
        };
        let obs = tr.to_observable();
        assert_eq!(obs.z_pre, 1);
        assert_eq!(obs.z, tr.z);
        assert_eq!(obs.a, tr.a);
        assert_eq!(obs.r_idx, tr.r_idx);
        assert_eq!(obs.horizon(), 2);
    }

    #[test]
    fn embedding_size_arithmetic() {
        // |U|=|Z|=|O|=2 decoupled model embeds as 4 hidden states, 4 observations
        let m = TabularDpomdp {
            spaces: SpaceSpec {
                n_u: 2,
                n_z: 2,
                n_a: 1,
                n_o: Some(2),
                reward_values: vec![0.0, 1.0],
            },
            transition: vec![vec![vec![0.25; 4]; 4]; 1],
            independent_observation: vec![vec![0.5, 0.5], vec![0.25, 0.75]],
            reward: vec![vec![vec![0], vec![1]], vec![vec![1], vec![0]]],
            gamma: 0.5,
            init: vec![0.125; 8],
        };
        let p = embed_dpomdp_as_pomdp(&m).unwrap();
        assert_eq!(p.spaces.n_u, 4);
        assert_eq!(p.spaces.n_z, 4);
        assert!(validate_pomdp(&p).is_valid());
        // indicator structure: one non-zero z~ block per (u, z)
        for z in 0..2 {
            for u in 0..2 {
                let row = &p.observation[z * 2 + u];
                for zt in 0..2 {
                    for o in 0..2 {
                        let v = row[zt * 2 + o];
                        if zt == z {
                            assert!((v - m.independent_observation[u][o]).abs() < 1e-15);
                        } else {
                            assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
    }
}
