//! Experiment sweeps: build an environment per grid cell, compute oracle
//! values, simulate, run the configured estimators, and emit a CSV table
//! plus an SVG plot.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ope_core::environments::{
    is_counterexample_pomdp, medical_dpomdp, medical_eval_policy, MedicalConfig,
};
use ope_core::estimators::{
    dpomdp_proxy_value, local_proxy_reward_dist, naive_is_value, oracle_is_value,
    pomdp_proxy_value, EstimateRecord, EstimatorOptions,
};
use ope_core::model::{BehaviorPolicy, EvaluationPolicy, ModelKind, ModelRef};
use ope_core::oracle::{exact_value, PolicyRef, DEFAULT_TERM_BUDGET};
use ope_core::probtables::{ContextMode, MatrixDescriptor, MatrixSource};
use ope_core::simulate;

use crate::formats::{self, AnyModel, AnyPolicy};
use crate::svg::{line_plot, Series};

pub const CSV_HEADER: &str =
    "alpha,estimator,v_hat,oracle_v_pie,oracle_v_pib,norm_residual,cond_number,dropped,seed,n,error";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum EnvSpec {
    /// Synthetic medical decoupled POMDP at the given generator seed.
    Medical { seed: u64 },
    /// The packaged importance-sampling bias counterexample; `gamma`
    /// replaces the sweep's alpha-independent discount.
    Figure3 { gamma: f64 },
    /// Model and policies from files; the alpha grid is ignored.
    Files {
        model: PathBuf,
        behavior: PathBuf,
        eval: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorSpec {
    /// theorem1 | theorem2 | prop1 | naive-is | oracle-is
    pub method: String,
    #[serde(default)]
    pub ridge: f64,
    #[serde(default)]
    pub renormalize: bool,
    #[serde(default)]
    pub clip_weight: Option<f64>,
    /// full-history | last-observation (IS only)
    #[serde(default)]
    pub context_mode: Option<String>,
    /// Pool empirical matrix counts across time steps.
    #[serde(default)]
    pub pool_time: bool,
}

fn default_alpha_grid() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub environment: EnvSpec,
    pub estimators: Vec<EstimatorSpec>,
    #[serde(default = "default_alpha_grid")]
    pub alpha_grid: Vec<f64>,
    pub horizon: usize,
    /// Trajectories per cell; 0 runs estimators in population mode.
    pub n: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Laplace smoothing for empirical matrices.
    #[serde(default)]
    pub smoothing: f64,
    #[serde(default)]
    pub dump_matrices: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        for &a in &self.alpha_grid {
            if !(0.0..=1.0).contains(&a) {
                bail!("alpha {a} outside [0, 1]");
            }
        }
        if self.alpha_grid.is_empty() {
            bail!("alpha grid is empty");
        }
        if self.seeds.is_empty() {
            bail!("seeds list is empty");
        }
        if let EnvSpec::Files { model, behavior, eval } = &self.environment {
            for p in [model, behavior, eval] {
                if !p.exists() {
                    bail!("referenced file {} does not exist", p.display());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ResultRow {
    pub alpha: f64,
    pub estimator: String,
    pub v_hat: f64,
    pub oracle_v_pie: f64,
    pub oracle_v_pib: f64,
    pub norm_residual: f64,
    pub cond_number: f64,
    pub dropped: usize,
    pub seed: u64,
    pub n: usize,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.alpha,
                r.estimator,
                r.v_hat,
                r.oracle_v_pie,
                r.oracle_v_pib,
                r.norm_residual,
                r.cond_number,
                r.dropped,
                r.seed,
                r.n,
                r.error
            ));
        }
        out
    }
}

struct Cell {
    alpha: f64,
    seed: u64,
    rows: Vec<ResultRow>,
}

struct BuiltEnv {
    model: AnyModel,
    behavior: BehaviorPolicy,
    eval: EvaluationPolicy,
}

fn build_env(spec: &EnvSpec, alpha: f64, horizon: usize) -> Result<BuiltEnv> {
    match spec {
        EnvSpec::Medical { seed } => {
            let mut cfg = MedicalConfig::new(*seed, alpha);
            cfg.horizon = horizon;
            let (model, behavior) = medical_dpomdp(&cfg)?;
            let eval = medical_eval_policy(&cfg)?;
            Ok(BuiltEnv {
                model: AnyModel::Dpomdp(model),
                behavior,
                eval,
            })
        }
        EnvSpec::Figure3 { gamma } => {
            let (model, behavior, eval) = is_counterexample_pomdp(alpha.max(1e-9), *gamma, horizon)?;
            Ok(BuiltEnv {
                model: AnyModel::Pomdp(model),
                behavior,
                eval,
            })
        }
        EnvSpec::Files { model, behavior, eval } => {
            let model = formats::read_model(model)?;
            let kind = model.kind();
            let AnyPolicy::Behavior(btables) = formats::read_policy(behavior)? else {
                bail!("behavior policy file must have kind \"behavior\"");
            };
            let AnyPolicy::EvalMemoryless(etables) = formats::read_policy(eval)? else {
                bail!("evaluation policy file must have kind \"eval_memoryless\"");
            };
            Ok(BuiltEnv {
                model,
                behavior: formats::behavior_from_tables(kind, btables),
                eval: EvaluationPolicy::Memoryless(formats::eval_from_tables(kind, etables)),
            })
        }
    }
}

fn spec_options(spec: &EstimatorSpec, smoothing: f64) -> (EstimatorOptions, ContextMode, f64) {
    let opts = EstimatorOptions {
        ridge: spec.ridge,
        renormalize: spec.renormalize,
        clip_weight: spec.clip_weight,
        ..Default::default()
    };
    let _ = &spec.pool_time;
    let mode = match spec.context_mode.as_deref() {
        Some("last-observation") => ContextMode::LastObservation,
        _ => ContextMode::FullHistory,
    };
    (opts, mode, smoothing)
}

/// Runs one estimator on one cell's data (or population matrices).
fn run_estimator(
    spec: &EstimatorSpec,
    env: &BuiltEnv,
    data: Option<&simulate::Dataset>,
    horizon: usize,
    smoothing: f64,
) -> ope_core::Result<EstimateRecord> {
    let model = env.model.as_ref();
    let gamma = model.gamma();
    let (opts, mode, smoothing) = spec_options(spec, smoothing);
    let records;
    let source = match data {
        Some(d) => {
            records = simulate::project_observable(d);
            MatrixSource::Empirical {
                records: &records,
                shape: &d.shape,
                smoothing,
                pool_time: spec.pool_time,
            }
        }
        None => MatrixSource::Population {
            model,
            behavior: &env.behavior,
        },
    };
    match spec.method.as_str() {
        "theorem1" => pomdp_proxy_value(&source, &env.eval, horizon, gamma, &opts),
        "theorem2" => dpomdp_proxy_value(&source, &env.eval, horizon, gamma, None, &opts),
        "prop1" => {
            let memoryless = env.eval.memoryless().ok_or_else(|| {
                ope_core::Error::InvalidParameter(
                    "prop1 needs a memoryless evaluation policy".into(),
                )
            })?;
            let dist = local_proxy_reward_dist(&source, memoryless, horizon, &opts)?;
            // report the final-step deviation distribution as a value record
            Ok(EstimateRecord {
                v_hat: dist.mean(),
                per_step: vec![ope_core::estimators::StepEstimate {
                    t: horizon,
                    probs: dist.probs.clone(),
                    residual: (dist.probs.iter().sum::<f64>() - 1.0).abs(),
                }],
                reward_values: dist.reward_values,
                diagnostics: Default::default(),
            })
        }
        "naive-is" => {
            let d = data.ok_or_else(|| {
                ope_core::Error::InvalidParameter("naive-is needs sampled data (n > 0)".into())
            })?;
            let records = simulate::project_observable(d);
            naive_is_value(&records, &d.shape, &env.eval, gamma, mode, &opts)
        }
        "oracle-is" => {
            let d = data.ok_or_else(|| {
                ope_core::Error::InvalidParameter("oracle-is needs sampled data (n > 0)".into())
            })?;
            oracle_is_value(d, &env.eval, &env.behavior, gamma)
        }
        other => Err(ope_core::Error::InvalidParameter(format!(
            "unknown estimator method {other:?}"
        ))),
    }
}

fn run_cell(cfg: &ExperimentConfig, alpha: f64, seed: u64, strict: bool) -> Result<Cell> {
    let env = build_env(&cfg.environment, alpha, cfg.horizon)?;
    let model = env.model.as_ref();
    let oracle_v_pie = exact_value(
        model,
        PolicyRef::Evaluation(&env.eval),
        cfg.horizon,
        DEFAULT_TERM_BUDGET,
    )?
    .v;
    let oracle_v_pib = exact_value(
        model,
        PolicyRef::Behavior(&env.behavior),
        cfg.horizon,
        DEFAULT_TERM_BUDGET,
    )?
    .v;
    let data = if cfg.n > 0 {
        Some(simulate::sample_dataset(
            model,
            &env.behavior,
            cfg.horizon,
            cfg.n,
            seed,
        )?)
    } else {
        None
    };

    let mut rows = Vec::new();
    for spec in &cfg.estimators {
        let row = match run_estimator(spec, &env, data.as_ref(), cfg.horizon, cfg.smoothing) {
            Ok(est) => {
                let residual = est
                    .per_step
                    .iter()
                    .map(|s| s.residual)
                    .fold(0.0f64, f64::max);
                ResultRow {
                    alpha,
                    estimator: spec.method.clone(),
                    v_hat: est.v_hat,
                    oracle_v_pie,
                    oracle_v_pib,
                    norm_residual: residual,
                    cond_number: est.diagnostics.worst_condition,
                    dropped: est.diagnostics.dropped_contexts,
                    seed,
                    n: cfg.n,
                    error: String::new(),
                }
            }
            Err(err) => {
                if strict {
                    bail!("estimator {} failed at alpha {alpha}, seed {seed}: {err}", spec.method);
                }
                ResultRow {
                    alpha,
                    estimator: spec.method.clone(),
                    v_hat: f64::NAN,
                    oracle_v_pie,
                    oracle_v_pib,
                    norm_residual: f64::NAN,
                    cond_number: f64::NAN,
                    dropped: 0,
                    seed,
                    n: cfg.n,
                    error: err.to_string().replace(',', ";"),
                }
            }
        };
        rows.push(row);
    }
    if rows.is_empty() {
        // oracle-only row so sweeps without estimators still record values
        rows.push(ResultRow {
            alpha,
            estimator: "oracle".into(),
            v_hat: oracle_v_pie,
            oracle_v_pie,
            oracle_v_pib,
            norm_residual: 0.0,
            cond_number: f64::NAN,
            dropped: 0,
            seed,
            n: cfg.n,
            error: String::new(),
        });
    }

    if cfg.dump_matrices {
        dump_matrices(cfg, &env, data.as_ref(), alpha, seed)?;
    }
    Ok(Cell { alpha, seed, rows })
}

fn dump_matrices(
    cfg: &ExperimentConfig,
    env: &BuiltEnv,
    data: Option<&simulate::Dataset>,
    alpha: f64,
    seed: u64,
) -> Result<()> {
    let dir = cfg.out_dir.join("matrices");
    fs::create_dir_all(&dir)?;
    let records;
    let source = match data {
        Some(d) => {
            records = simulate::project_observable(d);
            MatrixSource::Empirical {
                records: &records,
                shape: &d.shape,
                smoothing: cfg.smoothing,
                pool_time: false,
            }
        }
        None => MatrixSource::Population {
            model: env.model.as_ref(),
            behavior: &env.behavior,
        },
    };
    let spaces = env.model.as_ref().spaces();
    let mut dumped = Vec::new();
    for t in 0..=cfg.horizon {
        match env.model.kind() {
            ModelKind::Pomdp => {
                for a in 0..spaces.n_a {
                    if let Ok(m) = source.matrix(&MatrixDescriptor::PZGivenAZprev { t, a }) {
                        dumped.push(m);
                    }
                }
            }
            ModelKind::Dpomdp => {
                for z in 0..spaces.n_z {
                    for a in 0..spaces.n_a {
                        if let Ok(m) = source.matrix(&MatrixDescriptor::POGivenZAZprev { t, z, a })
                        {
                            dumped.push(m);
                        }
                    }
                }
            }
        }
    }
    #[derive(Serialize)]
    struct MatrixDump<'a> {
        descriptor: &'a str,
        row_labels: &'a [Vec<usize>],
        col_labels: &'a [Vec<usize>],
        values: Vec<Vec<f64>>,
        counts: &'a [u64],
        condition_number: f64,
    }
    let dumps: Vec<MatrixDump<'_>> = dumped
        .iter()
        .map(|m| MatrixDump {
            descriptor: &m.descriptor,
            row_labels: &m.row_labels,
            col_labels: &m.col_labels,
            values: (0..m.values.nrows())
                .map(|r| (0..m.values.ncols()).map(|c| m.values[(r, c)]).collect())
                .collect(),
            counts: &m.counts,
            condition_number: m.condition_number,
        })
        .collect();
    fs::write(
        dir.join(format!("alpha_{alpha}_seed_{seed}.json")),
        serde_json::to_string_pretty(&dumps)?,
    )?;
    Ok(())
}

/// Runs the full sweep; grid cells execute in parallel on `threads` workers
/// and rows come out in deterministic sorted order.
pub fn run_experiment(cfg: &ExperimentConfig, threads: usize, strict: bool) -> Result<ResultTable> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;

    let alphas: Vec<f64> = match cfg.environment {
        EnvSpec::Files { .. } => vec![0.0],
        _ => cfg.alpha_grid.clone(),
    };
    let mut cells: Vec<(f64, u64)> = Vec::new();
    for &alpha in &alphas {
        for &seed in &cfg.seeds {
            cells.push((alpha, seed));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .context("building thread pool")?;
    let results: Vec<Result<Cell>> = pool.install(|| {
        use rayon::prelude::*;
        cells
            .par_iter()
            .map(|&(alpha, seed)| run_cell(cfg, alpha, seed, strict))
            .collect()
    });

    let mut table = ResultTable::default();
    let mut collected: Vec<Cell> = Vec::new();
    for r in results {
        collected.push(r?);
    }
    collected.sort_by(|a, b| {
        a.alpha
            .partial_cmp(&b.alpha)
            .unwrap()
            .then(a.seed.cmp(&b.seed))
    });
    for cell in collected {
        table.rows.extend(cell.rows);
    }
    table.rows.sort_by(|a, b| {
        a.alpha
            .partial_cmp(&b.alpha)
            .unwrap()
            .then(a.estimator.cmp(&b.estimator))
            .then(a.seed.cmp(&b.seed))
    });

    fs::write(cfg.out_dir.join("results.csv"), table.to_csv())?;
    fs::write(cfg.out_dir.join("plot.svg"), render_plot(&table))?;
    Ok(table)
}

/// One series per estimator (mean across seeds per alpha) plus the two
/// oracle curves.
pub fn render_plot(table: &ResultTable) -> String {
    let mut by_series: BTreeMap<String, BTreeMap<u64, (f64, usize)>> = BTreeMap::new();
    let key = |alpha: f64| (alpha * 1e9).round() as u64;
    for row in &table.rows {
        if row.v_hat.is_finite() {
            let e = by_series
                .entry(row.estimator.clone())
                .or_default()
                .entry(key(row.alpha))
                .or_insert((0.0, 0));
            e.0 += row.v_hat;
            e.1 += 1;
        }
        for (name, v) in [("v(pi_e) oracle", row.oracle_v_pie), ("v(pi_b) oracle", row.oracle_v_pib)] {
            let e = by_series
                .entry(name.to_string())
                .or_default()
                .entry(key(row.alpha))
                .or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    let series: Vec<Series> = by_series
        .into_iter()
        .map(|(name, pts)| Series {
            name,
            points: pts
                .into_iter()
                .map(|(k, (sum, cnt))| (k as f64 / 1e9, sum / cnt as f64))
                .collect(),
        })
        .collect();
    line_plot("estimated value vs confoundedness", "alpha", "value", &series)
}

#[derive(Debug, Clone, Copy)]
pub struct FitResult {
    pub c_alpha: f64,
    pub c_gamma: f64,
    pub max_residual: f64,
}

/// Least-squares fit of `v ~ c_alpha * alpha + c_gamma * gamma` with zero
/// intercept over `(alpha, gamma, v)` points.
pub fn fit_affine(points: &[(f64, f64, f64)]) -> Result<FitResult> {
    let mut distinct_a: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct_a.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct_a.dedup();
    let mut distinct_g: Vec<f64> = points.iter().map(|p| p.1).collect();
    distinct_g.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct_g.dedup();
    if distinct_a.len() < 2 || distinct_g.len() < 2 {
        bail!("affine fit needs at least two distinct alpha and gamma values");
    }
    let (mut saa, mut sag, mut sgg, mut sva, mut svg) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(a, g, v) in points {
        saa += a * a;
        sag += a * g;
        sgg += g * g;
        sva += v * a;
        svg += v * g;
    }
    let det = saa * sgg - sag * sag;
    if det.abs() < 1e-12 {
        bail!("degenerate (alpha, gamma) grid: rank-deficient design");
    }
    let c_alpha = (sva * sgg - sag * svg) / det;
    let c_gamma = (saa * svg - sag * sva) / det;
    let mut max_residual: f64 = 0.0;
    for &(a, g, v) in points {
        max_residual = max_residual.max((v - c_alpha * a - c_gamma * g).abs());
    }
    Ok(FitResult {
        c_alpha,
        c_gamma,
        max_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_affine_data_is_recovered() {
        let mut pts = vec![];
        for &a in &[0.2, 0.4, 0.6, 0.8, 1.0] {
            for &g in &[0.3, 0.6, 0.9] {
                pts.push((a, g, 0.5 * a + 0.25 * g));
            }
        }
        let fit = fit_affine(&pts).unwrap();
        assert!((fit.c_alpha - 0.5).abs() < 1e-12);
        assert!((fit.c_gamma - 0.25).abs() < 1e-12);
        assert!(fit.max_residual < 1e-12);
    }

    #[test]
    fn constant_zero_series_fits_to_zero() {
        let mut pts = vec![];
        for &a in &[0.2, 0.6, 1.0] {
            for &g in &[0.3, 0.9] {
                pts.push((a, g, 0.0));
            }
        }
        let fit = fit_affine(&pts).unwrap();
        assert_eq!(fit.c_alpha, 0.0);
        assert_eq!(fit.c_gamma, 0.0);
    }

    #[test]
    fn degenerate_grid_is_rejected() {
        let pts = vec![(0.5, 0.3, 1.0), (0.5, 0.6, 1.2), (0.5, 0.9, 1.4)];
        assert!(fit_affine(&pts).is_err());
    }
}
