//! On-disk formats: model and policy JSON documents and newline-delimited
//! JSON datasets.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ope_core::model::{
    BehaviorPolicy, MemorylessPolicy, ModelKind, ModelRef, SpaceSpec, TabularDpomdp,
    TabularPomdp, Trajectory,
};
use ope_core::probtables::DatasetShape;
use ope_core::simulate::Dataset;

#[derive(Debug, Serialize, Deserialize)]
pub struct SpacesFile {
    pub n_u: usize,
    pub n_z: usize,
    pub n_a: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_o: Option<usize>,
    pub reward_values: Vec<f64>,
}

/// A single-document model file. POMDP transitions are `[a][u][u']`;
/// decoupled transitions are `[a][z][u][z'][u']` and `observation` holds the
/// independent-observation table `[u][o]`. Rewards are indices into
/// `reward_values`. The decoupled `init` is `[z_pre][z0][u0]`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub kind: String,
    pub spaces: SpacesFile,
    pub transition: serde_json::Value,
    pub observation: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pre_observation: Option<Vec<Vec<f64>>>,
    pub reward: serde_json::Value,
    pub gamma: f64,
    pub init: serde_json::Value,
}

pub enum AnyModel {
    Pomdp(TabularPomdp),
    Dpomdp(TabularDpomdp),
}

impl AnyModel {
    pub fn as_ref(&self) -> ModelRef<'_> {
        match self {
            AnyModel::Pomdp(m) => ModelRef::Pomdp(m),
            AnyModel::Dpomdp(m) => ModelRef::Dpomdp(m),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.as_ref().kind()
    }
}

pub fn model_to_file(model: ModelRef<'_>) -> ModelFile {
    match model {
        ModelRef::Pomdp(m) => ModelFile {
            kind: "pomdp".into(),
            spaces: SpacesFile {
                n_u: m.spaces.n_u,
                n_z: m.spaces.n_z,
                n_a: m.spaces.n_a,
                n_o: None,
                reward_values: m.spaces.reward_values.clone(),
            },
            transition: serde_json::to_value(&m.transition).unwrap(),
            observation: m.observation.clone(),
            pre_observation: Some(m.pre_observation.clone()),
            reward: serde_json::to_value(&m.reward).unwrap(),
            gamma: m.gamma,
            init: serde_json::to_value(&m.init).unwrap(),
        },
        ModelRef::Dpomdp(m) => {
            // [a][z][u][z'][u'] nesting for the joint transition
            let (n_z, n_u) = (m.spaces.n_z, m.spaces.n_u);
            let transition: Vec<Vec<Vec<Vec<Vec<f64>>>>> = (0..m.spaces.n_a)
                .map(|a| {
                    (0..n_z)
                        .map(|z| {
                            (0..n_u)
                                .map(|u| {
                                    (0..n_z)
                                        .map(|z2| {
                                            (0..n_u)
                                                .map(|u2| {
                                                    m.transition[a][z * n_u + u]
                                                        [z2 * n_u + u2]
                                                })
                                                .collect()
                                        })
                                        .collect()
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let init: Vec<Vec<Vec<f64>>> = (0..n_z)
                .map(|zp| {
                    (0..n_z)
                        .map(|z0| {
                            (0..n_u)
                                .map(|u0| m.init[(zp * n_z + z0) * n_u + u0])
                                .collect()
                        })
                        .collect()
                })
                .collect();
            ModelFile {
                kind: "dpomdp".into(),
                spaces: SpacesFile {
                    n_u,
                    n_z,
                    n_a: m.spaces.n_a,
                    n_o: m.spaces.n_o,
                    reward_values: m.spaces.reward_values.clone(),
                },
                transition: serde_json::to_value(&transition).unwrap(),
                observation: m.independent_observation.clone(),
                pre_observation: None,
                reward: serde_json::to_value(&m.reward).unwrap(),
                gamma: m.gamma,
                init: serde_json::to_value(&init).unwrap(),
            }
        }
    }
}

pub fn file_to_model(file: &ModelFile) -> Result<AnyModel> {
    let spaces = SpaceSpec {
        n_u: file.spaces.n_u,
        n_z: file.spaces.n_z,
        n_a: file.spaces.n_a,
        n_o: file.spaces.n_o,
        reward_values: file.spaces.reward_values.clone(),
    };
    match file.kind.as_str() {
        "pomdp" => {
            let transition: Vec<Vec<Vec<f64>>> =
                serde_json::from_value(file.transition.clone()).context("transition")?;
            let reward: Vec<Vec<usize>> =
                serde_json::from_value(file.reward.clone()).context("reward")?;
            let init: Vec<f64> = serde_json::from_value(file.init.clone()).context("init")?;
            let pre_observation = file
                .pre_observation
                .clone()
                .unwrap_or_else(|| file.observation.clone());
            Ok(AnyModel::Pomdp(TabularPomdp {
                spaces,
                transition,
                observation: file.observation.clone(),
                pre_observation,
                reward,
                gamma: file.gamma,
                init,
            }))
        }
        "dpomdp" => {
            let nested: Vec<Vec<Vec<Vec<Vec<f64>>>>> =
                serde_json::from_value(file.transition.clone()).context("transition")?;
            let (n_z, n_u) = (spaces.n_z, spaces.n_u);
            let n_s = n_z * n_u;
            let mut transition = vec![vec![vec![0.0; n_s]; n_s]; spaces.n_a];
            for (a, per_z) in nested.iter().enumerate() {
                for (z, per_u) in per_z.iter().enumerate() {
                    for (u, per_z2) in per_u.iter().enumerate() {
                        for (z2, per_u2) in per_z2.iter().enumerate() {
                            for (u2, &p) in per_u2.iter().enumerate() {
                                transition[a][z * n_u + u][z2 * n_u + u2] = p;
                            }
                        }
                    }
                }
            }
            let reward: Vec<Vec<Vec<usize>>> =
                serde_json::from_value(file.reward.clone()).context("reward")?;
            let nested_init: Vec<Vec<Vec<f64>>> =
                serde_json::from_value(file.init.clone()).context("init")?;
            let mut init = vec![0.0; n_z * n_z * n_u];
            for (zp, per_z0) in nested_init.iter().enumerate() {
                for (z0, per_u0) in per_z0.iter().enumerate() {
                    for (u0, &p) in per_u0.iter().enumerate() {
                        init[(zp * n_z + z0) * n_u + u0] = p;
                    }
                }
            }
            Ok(AnyModel::Dpomdp(TabularDpomdp {
                spaces,
                transition,
                independent_observation: file.observation.clone(),
                reward,
                gamma: file.gamma,
                init,
            }))
        }
        other => bail!("unknown model kind {other:?}"),
    }
}

pub fn read_model(path: &Path) -> Result<AnyModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: ModelFile = serde_json::from_str(&text).context("parsing model JSON")?;
    file_to_model(&file)
}

pub fn write_model(path: &Path, model: ModelRef<'_>) -> Result<()> {
    let file = model_to_file(model);
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Policy file: `tables[t][context][a]`. Behavior contexts are hidden
/// states (`u`, or `z * n_u + u`); memoryless evaluation contexts are
/// observations (`z`, or `z * n_o + o`).
#[derive(Debug, Serialize, Deserialize)]
pub struct PolicyFile {
    pub kind: String,
    pub tables: Vec<Vec<Vec<f64>>>,
}

pub enum AnyPolicy {
    Behavior(Vec<Vec<Vec<f64>>>),
    EvalMemoryless(Vec<Vec<Vec<f64>>>),
}

pub fn read_policy(path: &Path) -> Result<AnyPolicy> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: PolicyFile = serde_json::from_str(&text).context("parsing policy JSON")?;
    match file.kind.as_str() {
        "behavior" => Ok(AnyPolicy::Behavior(file.tables)),
        "eval_memoryless" => Ok(AnyPolicy::EvalMemoryless(file.tables)),
        other => bail!("unknown policy kind {other:?}"),
    }
}

pub fn write_behavior_policy(path: &Path, policy: &BehaviorPolicy) -> Result<()> {
    let file = PolicyFile {
        kind: "behavior".into(),
        tables: policy.steps.clone(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn write_eval_policy(path: &Path, policy: &MemorylessPolicy) -> Result<()> {
    let file = PolicyFile {
        kind: "eval_memoryless".into(),
        tables: policy.steps.clone(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn behavior_from_tables(kind: ModelKind, tables: Vec<Vec<Vec<f64>>>) -> BehaviorPolicy {
    BehaviorPolicy { kind, steps: tables }
}

pub fn eval_from_tables(kind: ModelKind, tables: Vec<Vec<Vec<f64>>>) -> MemorylessPolicy {
    MemorylessPolicy { kind, steps: tables }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    fingerprint: u64,
    seed: u64,
    #[serde(rename = "L")]
    horizon: usize,
    n: usize,
    kind: String,
    shape: ShapeFile,
}

#[derive(Debug, Serialize, Deserialize)]
struct ShapeFile {
    n_z: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_o: Option<usize>,
    n_a: usize,
    reward_values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    z_pre: usize,
    u: Vec<usize>,
    z: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    o: Vec<usize>,
    a: Vec<usize>,
    r: Vec<usize>,
}

/// Dataset file: one JSON header line, then one JSON record per trajectory.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let header = DatasetHeader {
        fingerprint: dataset.fingerprint,
        seed: dataset.seed,
        horizon: dataset.horizon,
        n: dataset.records.len(),
        kind: match dataset.kind {
            ModelKind::Pomdp => "pomdp".into(),
            ModelKind::Dpomdp => "dpomdp".into(),
        },
        shape: ShapeFile {
            n_z: dataset.shape.n_z,
            n_o: dataset.shape.n_o,
            n_a: dataset.shape.n_a,
            reward_values: dataset.shape.reward_values.clone(),
        },
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for rec in &dataset.records {
        let line = RecordLine {
            z_pre: rec.z_pre,
            u: rec.u.clone(),
            z: rec.z.clone(),
            o: rec.o.clone(),
            a: rec.a.clone(),
            r: rec.r_idx.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = BufReader::new(file).lines();
    let header: DatasetHeader = serde_json::from_str(
        &lines
            .next()
            .context("dataset file is empty")??,
    )
    .context("parsing dataset header")?;
    let kind = match header.kind.as_str() {
        "pomdp" => ModelKind::Pomdp,
        "dpomdp" => ModelKind::Dpomdp,
        other => bail!("unknown dataset kind {other:?}"),
    };
    let mut records = Vec::with_capacity(header.n);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line).context("parsing dataset record")?;
        records.push(Trajectory {
            z_pre: rec.z_pre,
            u: rec.u,
            z: rec.z,
            o: rec.o,
            a: rec.a,
            r_idx: rec.r,
        });
    }
    if records.len() != header.n {
        bail!("dataset header declares {} records, file has {}", header.n, records.len());
    }
    Ok(Dataset {
        fingerprint: header.fingerprint,
        seed: header.seed,
        horizon: header.horizon,
        kind,
        shape: DatasetShape {
            n_z: header.shape.n_z,
            n_o: header.shape.n_o,
            n_a: header.shape.n_a,
            reward_values: header.shape.reward_values,
        },
        records,
    })
}
