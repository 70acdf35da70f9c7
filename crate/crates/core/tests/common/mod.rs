//! Shared test oracles: brute-force enumeration over full joint trajectories
//! (hidden states included), weighted by raw model probabilities. Kept
//! independent of the library's forward recursions on purpose.

#![allow(dead_code)]

use ope_core::model::{TabularDpomdp, TabularPomdp};

/// Policy as a pure closure over the full trajectory prefix: hidden states
/// and observations through step `t`, actions before `t`.
pub type PolicyFn<'a> = &'a dyn Fn(usize, &[usize], &[usize], &[usize], &[usize]) -> Vec<f64>;

pub struct BruteResult {
    pub v: f64,
    /// `per_step[t][reward_index]`
    pub per_step: Vec<Vec<f64>>,
}

/// Exhaustive enumeration of all `(u, z, a)` sequences of a POMDP.
pub fn brute_pomdp(m: &TabularPomdp, policy: PolicyFn<'_>, horizon: usize) -> BruteResult {
    let n_r = m.spaces.reward_values.len();
    let mut per_step = vec![vec![0.0; n_r]; horizon + 1];

    struct Frame {
        us: Vec<usize>,
        zs: Vec<usize>,
        aas: Vec<usize>,
        w: f64,
    }
    let mut stack: Vec<Frame> = Vec::new();
    for (u0, &p0) in m.init.iter().enumerate() {
        if p0 > 0.0 {
            stack.push(Frame {
                us: vec![u0],
                zs: vec![],
                aas: vec![],
                w: p0,
            });
        }
    }
    while let Some(f) = stack.pop() {
        let t = f.us.len() - 1;
        let u = f.us[t];
        for (z, &pz) in m.observation[u].iter().enumerate() {
            if pz == 0.0 {
                continue;
            }
            let mut zs = f.zs.clone();
            zs.push(z);
            let dist = policy(t, &f.us, &zs, &[], &f.aas);
            for (a, &pa) in dist.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                let w = f.w * pz * pa;
                per_step[t][m.reward[u][a]] += w;
                if t < horizon {
                    let mut aas = f.aas.clone();
                    aas.push(a);
                    for (u2, &pt) in m.transition[a][u].iter().enumerate() {
                        if pt == 0.0 {
                            continue;
                        }
                        let mut us = f.us.clone();
                        us.push(u2);
                        stack.push(Frame {
                            us,
                            zs: zs.clone(),
                            aas: aas.clone(),
                            w: w * pt,
                        });
                    }
                }
            }
        }
    }

    let mut v = 0.0;
    let mut g = 1.0;
    for probs in &per_step {
        v += g * probs
            .iter()
            .zip(&m.spaces.reward_values)
            .map(|(p, r)| p * r)
            .sum::<f64>();
        g *= m.gamma;
    }
    BruteResult { v, per_step }
}

/// Exhaustive enumeration of all `(z, u, o, a)` sequences of a decoupled
/// model.
pub fn brute_dpomdp(m: &TabularDpomdp, policy: PolicyFn<'_>, horizon: usize) -> BruteResult {
    let n_r = m.spaces.reward_values.len();
    let n_o = m.n_o();
    let mut per_step = vec![vec![0.0; n_r]; horizon + 1];

    struct Frame {
        us: Vec<usize>,
        zs: Vec<usize>,
        os: Vec<usize>,
        aas: Vec<usize>,
        w: f64,
    }
    let mut stack: Vec<Frame> = Vec::new();
    for z0 in 0..m.spaces.n_z {
        for u0 in 0..m.spaces.n_u {
            let mass: f64 = (0..m.spaces.n_z)
                .map(|zp| m.init[m.init_index(zp, z0, u0)])
                .sum();
            if mass > 0.0 {
                stack.push(Frame {
                    us: vec![u0],
                    zs: vec![z0],
                    os: vec![],
                    aas: vec![],
                    w: mass,
                });
            }
        }
    }
    while let Some(f) = stack.pop() {
        let t = f.us.len() - 1;
        let u = f.us[t];
        let z = f.zs[t];
        for o in 0..n_o {
            let po = m.independent_observation[u][o];
            if po == 0.0 {
                continue;
            }
            let mut os = f.os.clone();
            os.push(o);
            let dist = policy(t, &f.us, &f.zs, &os, &f.aas);
            for (a, &pa) in dist.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                let w = f.w * po * pa;
                per_step[t][m.reward[u][z][a]] += w;
                if t < horizon {
                    let mut aas = f.aas.clone();
                    aas.push(a);
                    let s = m.joint(z, u);
                    for s2 in 0..m.spaces.joint_states() {
                        let pt = m.transition[a][s][s2];
                        if pt == 0.0 {
                            continue;
                        }
                        let (z2, u2) = m.split(s2);
                        let mut us = f.us.clone();
                        us.push(u2);
                        let mut zs = f.zs.clone();
                        zs.push(z2);
                        stack.push(Frame {
                            us,
                            zs,
                            os: os.clone(),
                            aas: aas.clone(),
                            w: w * pt,
                        });
                    }
                }
            }
        }
    }

    let mut v = 0.0;
    let mut g = 1.0;
    for probs in &per_step {
        v += g * probs
            .iter()
            .zip(&m.spaces.reward_values)
            .map(|(p, r)| p * r)
            .sum::<f64>();
        g *= m.gamma;
    }
    BruteResult { v, per_step }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
