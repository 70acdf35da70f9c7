//! Command-line front end for confounded off-policy evaluation.

pub mod experiment;
pub mod formats;
pub mod svg;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ope_core::environments::{
    is_counterexample_pomdp, is_sufficient_env, medical_dpomdp, medical_eval_policy,
    MedicalConfig, MEDICAL_ACCEPTANCE_SEED,
};
use ope_core::estimators::{
    dpomdp_proxy_value, local_proxy_reward_dist, naive_is_population_value, naive_is_value,
    oracle_is_value, pomdp_proxy_value, EstimateRecord, EstimatorOptions,
};
use ope_core::model::{EvaluationPolicy, ModelKind, ModelRef};
use ope_core::oracle::{exact_value, PolicyRef, DEFAULT_TERM_BUDGET};
use ope_core::probtables::{ContextMode, MatrixSource};
use ope_core::simulate;

use experiment::{fit_affine, run_experiment, ExperimentConfig};
use formats::{AnyModel, AnyPolicy};

#[derive(Parser)]
#[command(
    name = "ope",
    version,
    about = "Off-policy evaluation for confounded tabular POMDPs",
    disable_help_subcommand = true
)]
struct Cli {
    /// Default sampling seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for experiment sweeps (0 = one per logical CPU).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Turn recoverable data problems into hard failures.
    #[arg(long, global = true)]
    strict: bool,
    /// Print diagnostics as JSON.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check every invariant of a model file; prints violations.
    Validate { model: PathBuf },
    /// Sample behavior trajectories to a newline-delimited JSON dataset.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        /// Behavior policy file.
        #[arg(long)]
        policy: PathBuf,
        /// Horizon L (steps 0..=L).
        #[arg(short = 'L', long)]
        horizon: usize,
        #[arg(short, long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset path.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run an estimator on a dataset (or on exact population matrices).
    Estimate {
        /// theorem1 | theorem2 | prop1 | naive-is | oracle-is
        #[arg(long)]
        method: String,
        /// Dataset file (required unless --population).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eval_policy: PathBuf,
        /// Use exact population matrices from --model and --behavior-policy.
        #[arg(long)]
        population: bool,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Behavior policy file (population mode and oracle-is).
        #[arg(long)]
        behavior_policy: Option<PathBuf>,
        /// Horizon; defaults to the dataset's.
        #[arg(short = 'L', long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        smoothing: f64,
        #[arg(long, default_value_t = 0.0)]
        ridge: f64,
        #[arg(long)]
        renormalize: bool,
        /// full-history | last-observation (IS only).
        #[arg(long, default_value = "full-history")]
        context_mode: String,
        /// Write the estimator's conditional matrices to this directory.
        #[arg(long)]
        dump_matrices: Option<PathBuf>,
    },
    /// Run a sweep described by a JSON config; writes results.csv and
    /// plot.svg.
    Experiment {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print exact and importance-sampling values for the packaged
    /// counterexample model, plus affine fits over the standard grid.
    Figure3 {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        gamma: f64,
        /// Horizon of the packaged model runs.
        #[arg(short = 'L', long, default_value_t = 1)]
        horizon: usize,
    },
    /// Write a packaged environment (model + policies) as JSON files.
    Env {
        /// figure3 | medical | sufficient
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long, default_value_t = MEDICAL_ACCEPTANCE_SEED)]
        env_seed: u64,
        #[arg(short = 'L', long, default_value_t = 4)]
        horizon: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Entry point shared by the binary and the test suite. Exit codes:
/// 0 success, 1 validation failure under --strict, 2 usage error,
/// 3 numerical (singularity) failure under --strict.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // clap prints help/version through the error path with status 0
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let numerical = err
                .downcast_ref::<ope_core::Error>()
                .map(|e| matches!(e, ope_core::Error::SingularMatrix { .. }))
                .unwrap_or(false);
            if numerical && cli.strict {
                3
            } else if cli.strict {
                1
            } else {
                // recoverable: reported, nothing written
                0
            }
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.cmd {
        Cmd::Validate { model } => {
            let model = formats::read_model(model)?;
            let report = model.as_ref().validate();
            if report.is_valid() {
                println!("valid");
                Ok(0)
            } else {
                println!("{report}");
                Ok(if cli.strict { 1 } else { 0 })
            }
        }
        Cmd::Simulate {
            model,
            policy,
            horizon,
            n,
            seed,
            out,
        } => {
            let model = formats::read_model(model)?;
            let AnyPolicy::Behavior(tables) = formats::read_policy(policy)? else {
                bail!("simulate needs a behavior policy file");
            };
            let behavior = formats::behavior_from_tables(model.kind(), tables);
            let data = simulate::sample_dataset(
                model.as_ref(),
                &behavior,
                *horizon,
                *n,
                seed.unwrap_or(cli.seed),
            )?;
            formats::write_dataset(out, &data)?;
            println!(
                "wrote {} trajectories (fingerprint {:016x}) to {}",
                data.records.len(),
                data.fingerprint,
                out.display()
            );
            Ok(0)
        }
        Cmd::Estimate {
            method,
            data,
            eval_policy,
            population,
            model,
            behavior_policy,
            horizon,
            smoothing,
            ridge,
            renormalize,
            context_mode,
            dump_matrices,
        } => {
            let opts = EstimatorOptions {
                ridge: *ridge,
                renormalize: *renormalize,
                ..Default::default()
            };
            let mode = match context_mode.as_str() {
                "full-history" => ContextMode::FullHistory,
                "last-observation" => ContextMode::LastObservation,
                other => bail!("unknown context mode {other:?}"),
            };

            let dataset = data.as_ref().map(|p| formats::read_dataset(p)).transpose()?;
            let loaded_model = model.as_ref().map(|p| formats::read_model(p)).transpose()?;
            let kind = match (&dataset, &loaded_model) {
                (Some(d), _) => d.kind,
                (None, Some(m)) => m.kind(),
                (None, None) => bail!("estimate needs --data or --population with --model"),
            };
            let AnyPolicy::EvalMemoryless(etables) = formats::read_policy(eval_policy)? else {
                bail!("evaluation policy file must have kind \"eval_memoryless\"");
            };
            let eval = EvaluationPolicy::Memoryless(formats::eval_from_tables(kind, etables));
            let behavior = behavior_policy
                .as_ref()
                .map(|p|

 -> Result<_> {
                    let AnyPolicy::Behavior(tables) = formats::read_policy(p)? else {
                        bail!("behavior policy file must have kind \"behavior\"");
                    };
                    Ok(formats::behavior_from_tables(kind, tables))
                })
                .transpose()?;

            let horizon = horizon
                .or_else(|| dataset.as_ref().map(|d| d.horizon))
                .context("provide --horizon when running without --data")?;

            let records;
            let source = if *population {
                let m = loaded_model
                    .as_ref()
                    .context("--population needs --model")?;
                MatrixSource::Population {
                    model: m.as_ref(),
                    behavior: behavior
                        .as_ref()
                        .context("--population needs --behavior-policy")?,
                }
            } else {
                let d = dataset.as_ref().context("estimate needs --data")?;
                records = simulate::project_observable(d);
                MatrixSource::Empirical {
                    records: &records,
                    shape: &d.shape,
                    smoothing: *smoothing,
                    pool_time: false,
                }
            };
            let gamma = match &loaded_model {
                Some(m) => m.as_ref().gamma(),
                None => dataset
                    .as_ref()
                    .map(|_| 0.9)
                    .context("estimate needs a model or dataset")?,
            };

            let est: EstimateRecord = match method.as_str() {
                "theorem1" => pomdp_proxy_value(&source, &eval, horizon, gamma, &opts)?,
                "theorem2" => dpomdp_proxy_value(&source, &eval, horizon, gamma, None, &opts)?,
                "prop1" => {
                    let memoryless = eval.memoryless().context("prop1 needs memoryless policy")?;
                    let dist = local_proxy_reward_dist(&source, memoryless, horizon, &opts)?;
                    println!("P(r_L) = {:?}", dist.probs);
                    EstimateRecord {
                        v_hat: dist.mean(),
                        per_step: vec![],
                        reward_values: dist.reward_values,
                        diagnostics: Default::default(),
                    }
                }
                "naive-is" => {
                    let d = dataset.as_ref().context("naive-is needs --data")?;
                    let recs = simulate::project_observable(d);
                    naive_is_value(&recs, &d.shape, &eval, gamma, mode, &opts)?
                }
                "oracle-is" => {
                    let d = dataset.as_ref().context("oracle-is needs --data")?;
                    oracle_is_value(
                        d,
                        &eval,
                        behavior
                            .as_ref()
                            .context("oracle-is needs --behavior-policy")?,
                        gamma,
                    )?
                }
                other => bail!("unknown method {other:?}"),
            };
            println!("v_hat = {}", est.v_hat);
            if cli.verbose {
                #[derive(serde::Serialize)]
                struct Diag {
                    worst_condition: f64,
                    dropped_contexts: usize,
                    excluded_records: usize,
                    clip_events: usize,
                    stderr: Option<f64>,
                    per_step_residuals: Vec<f64>,
                }
                let d = Diag {
                    worst_condition: est.diagnostics.worst_condition,
                    dropped_contexts: est.diagnostics.dropped_contexts,
                    excluded_records: est.diagnostics.excluded_records,
                    clip_events: est.diagnostics.clip_events,
                    stderr: est.diagnostics.stderr,
                    per_step_residuals: est.per_step.iter().map(|s| s.residual).collect(),
                };
                println!("{}", serde_json::to_string_pretty(&d)?);
            }
            if let Some(dir) = dump_matrices {
                std::fs::create_dir_all(dir)?;
                // redo the source enumeration through the experiment dumper
                let cfg = ExperimentConfig {
                    environment: experiment::EnvSpec::Files {
                        model: model.clone().unwrap_or_default(),
                        behavior: PathBuf::new(),
                        eval: PathBuf::new(),
                    },
                    estimators: vec![],
                    alpha_grid: vec![0.0],
                    horizon,
                    n: 0,
                    seeds: vec![0],
                    out_dir: dir.clone(),
                    smoothing: *smoothing,
                    dump_matrices: false,
                };
                let _ = cfg; // per-estimate dumps cover the chain blocks only
                dump_chain_matrices(dir, &source, kind, horizon)?;
            }
            Ok(0)
        }
        Cmd::Experiment { config } => {
            let text = std::fs::read_to_string(config)
                .with_context(|| format!("reading {}", config.display()))?;
            let cfg: ExperimentConfig = serde_json::from_str(&text).context("parsing config")?;
            let threads = if cli.threads == 0 {
                std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
            } else {
                cli.threads
            };
            let table = run_experiment(&cfg, threads, cli.strict)?;
            println!(
                "wrote {} rows to {}",
                table.rows.len(),
                cfg.out_dir.join("results.csv").display()
            );
            Ok(0)
        }
        Cmd::Figure3 { alpha, gamma, horizon } => {
            let (m, b, e) = is_counterexample_pomdp(*alpha, *gamma, *horizon)?;
            let mref = ModelRef::Pomdp(&m);
            let vb = exact_value(mref, PolicyRef::Behavior(&b), *horizon, DEFAULT_TERM_BUDGET)?.v;
            let ve = exact_value(mref, PolicyRef::Evaluation(&e), *horizon, DEFAULT_TERM_BUDGET)?.v;
            let is = naive_is_population_value(mref, &b, &e, *horizon, DEFAULT_TERM_BUDGET)?.v_hat;
            println!("at alpha = {alpha}, gamma = {gamma} (L = {horizon}):");
            println!("  v(pi_b)          = {vb:.6}");
            println!("  v(pi_e)          = {ve:.6}");
            println!("  naive IS (pop.)  = {is:.6}");

            let mut pb = vec![];
            let mut pe = vec![];
            let mut pis = vec![];
            for &a in &[0.2, 0.4, 0.6, 0.8, 1.0] {
                for &g in &[0.3, 0.6, 0.9] {
                    let (m, b, e) = is_counterexample_pomdp(a, g, *horizon)?;
                    let mref = ModelRef::Pomdp(&m);
                    pb.push((a, g, exact_value(mref, PolicyRef::Behavior(&b), *horizon, DEFAULT_TERM_BUDGET)?.v));
                    pe.push((a, g, exact_value(mref, PolicyRef::Evaluation(&e), *horizon, DEFAULT_TERM_BUDGET)?.v));
                    pis.push((
                        a,
                        g,
                        naive_is_population_value(mref, &b, &e, *horizon, DEFAULT_TERM_BUDGET)?.v_hat,
                    ));
                }
            }
            let fb = fit_affine(&pb)?;
            let fe = fit_affine(&pe)?;
            let fis = fit_affine(&pis)?;
            println!("affine fits over alpha in 0.2..1.0, gamma in {{0.3, 0.6, 0.9}}:");
            println!(
                "  v(pi_b)  ~ {:+.4} alpha {:+.4} gamma   (max residual {:.4})",
                fb.c_alpha, fb.c_gamma, fb.max_residual
            );
            println!(
                "  v(pi_e)  ~ {:+.4} alpha {:+.4} gamma   (max residual {:.4})",
                fe.c_alpha, fe.c_gamma, fe.max_residual
            );
            println!(
                "  naive IS ~ {:+.4} alpha {:+.4} gamma   (max residual {:.4})",
                fis.c_alpha, fis.c_gamma, fis.max_residual
            );
            let denom = fb.c_alpha - fis.c_alpha;
            if denom.abs() > 1e-12 {
                let ratio = (fis.c_gamma - fb.c_gamma) / denom;
                println!("  v(pi_b) = IS crossing at alpha = {ratio:.3} gamma");
            }
            Ok(0)
        }
        Cmd::Env {
            name,
            alpha,
            gamma,
            env_seed,
            horizon,
            out_dir,
        } => {
            std::fs::create_dir_all(out_dir)?;
            match name.as_str() {
                "figure3" => {
                    let (m, b, e) = is_counterexample_pomdp(*alpha, *gamma, *horizon)?;
                    formats::write_model(&out_dir.join("model.json"), ModelRef::Pomdp(&m))?;
                    formats::write_behavior_policy(&out_dir.join("behavior.json"), &b)?;
                    formats::write_eval_policy(
                        &out_dir.join("eval.json"),
                        e.memoryless().unwrap(),
                    )?;
                }
                "medical" => {
                    let mut cfg = MedicalConfig::new(*env_seed, *alpha);
                    cfg.horizon = *horizon;
                    let (m, b) = medical_dpomdp(&cfg)?;
                    let e = medical_eval_policy(&cfg)?;
                    formats::write_model(&out_dir.join("model.json"), ModelRef::Dpomdp(&m))?;
                    formats::write_behavior_policy(&out_dir.join("behavior.json"), &b)?;
                    formats::write_eval_policy(
                        &out_dir.join("eval.json"),
                        e.memoryless().unwrap(),
                    )?;
                }
                "sufficient" => {
                    let (m, b, e) = is_sufficient_env(*env_seed, *horizon);
                    formats::write_model(&out_dir.join("model.json"), ModelRef::Pomdp(&m))?;
                    formats::write_behavior_policy(&out_dir.join("behavior.json"), &b)?;
                    formats::write_eval_policy(
                        &out_dir.join("eval.json"),
                        e.memoryless().unwrap(),
                    )?;
                }
                other => bail!("unknown environment {other:?}"),
            }
            println!("wrote environment files to {}", out_dir.display());
            Ok(0)
        }
    }
}

fn dump_chain_matrices(
    dir: &std::path::Path,
    source: &MatrixSource<'_>,
    kind: ModelKind,
    horizon: usize,
) -> Result<()> {
    use ope_core::probtables::MatrixDescriptor;
    #[derive(serde::Serialize)]
    struct MatrixDump {
        descriptor: String,
        row_labels: Vec<Vec<usize>>,
        col_labels: Vec<Vec<usize>>,
        values: Vec<Vec<f64>>,
        counts: Vec<u64>,
        condition_number: f64,
    }
    let mut dumps = Vec::new();
    let n_a = source.n_a();
    let n_z = source.n_z();
    for t in 0..=horizon {
        match kind {
            ModelKind::Pomdp => {
                for a in 0..n_a {
                    if let Ok(m) = source.matrix(&MatrixDescriptor::PZGivenAZprev { t, a }) {
                        dumps.push(m);
                    }
                }
            }
            ModelKind::Dpomdp => {
                for z in 0..n_z {
                    for a in 0..n_a {
                        if let Ok(m) = source.matrix(&MatrixDescriptor::POGivenZAZprev { t, z, a })
                        {
                            dumps.push(m);
                        }
                    }
                }
            }
        }
    }
    let out: Vec<MatrixDump> = dumps
        .into_iter()
        .map(|m| MatrixDump {
            descriptor: m.descriptor.clone(),
            row_labels: m.row_labels.clone(),
            col_labels: m.col_labels.clone(),
            values: (0..m.values.nrows())
                .map(|r| (0..m.values.ncols()).map(|c| m.values[(r, c)]).collect())
                .collect(),
            counts: m.counts.clone(),
            condition_number: m.condition_number,
        })
        .collect();
    std::fs::write(dir.join("matrices.json"), serde_json::to_string_pretty(&out)?)?;
    Ok(())
}
