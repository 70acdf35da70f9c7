//! Conditional-probability matrices: empirical estimation from observable
//! records, linear solving with conditioning diagnostics, index-set
//! selection for the decoupled estimator, and the matrix source abstraction
//! that lets estimators run interchangeably on population or empirical
//! matrices.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{BehaviorPolicy, ModelKind, ModelRef, ObservableRecord, SpaceSpec};
use crate::oracle::{self, Var};

/// Shape metadata an empirical dataset carries so estimators can size
/// matrices and map reward indices to values without the generating model.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetShape {
    pub n_z: usize,
    pub n_o: Option<usize>,
    pub n_a: usize,
    pub reward_values: Vec<f64>,
}

impl DatasetShape {
    pub fn kind(&self) -> ModelKind {
        if self.n_o.is_some() {
            ModelKind::Dpomdp
        } else {
            ModelKind::Pomdp
        }
    }
}

/// Labeled conditional-probability matrix.
///
/// Plain conditional targets have columns summing to 1 (over defined
/// entries); joint targets sum to the conditional mass of their fixed
/// coordinates. Zero-probability (or zero-count) conditioning columns are
/// NaN-marked.
#[derive(Debug, Clone)]
pub struct CondProbMatrix {
    pub descriptor: String,
    pub row_labels: Vec<Vec<usize>>,
    pub col_labels: Vec<Vec<usize>>,
    pub values: DMatrix<f64>,
    /// Per-column conditioning-event sample counts; zero for population
    /// matrices.
    pub counts: Vec<u64>,
    /// Spectral condition number; NaN when non-square or singular.
    pub condition_number: f64,
}

impl CondProbMatrix {
    pub fn new(
        descriptor: String,
        row_labels: Vec<Vec<usize>>,
        col_labels: Vec<Vec<usize>>,
        values: DMatrix<f64>,
        counts: Vec<u64>,
    ) -> Self {
        CondProbMatrix {
            descriptor,
            row_labels,
            col_labels,
            values,
            counts,
            condition_number: f64::NAN,
        }
    }

    pub fn has_nan(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    pub fn nan_columns(&self) -> usize {
        (0..self.values.ncols())
            .filter(|&c| self.values.column(c).iter().any(|v| v.is_nan()))
            .count()
    }

    /// Row/column submatrix; labels follow the selection.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> CondProbMatrix {
        let mut values = DMatrix::zeros(rows.len(), cols.len());
        for (ri, &r) in rows.iter().enumerate() {
            for (ci, &c) in cols.iter().enumerate() {
                values[(ri, ci)] = self.values[(r, c)];
            }
        }
        let mut out = CondProbMatrix::new(
            format!("{}[rows {:?}, cols {:?}]", self.descriptor, rows, cols),
            rows.iter().map(|&r| self.row_labels[r].clone()).collect(),
            cols.iter().map(|&c| self.col_labels[c].clone()).collect(),
            values,
            cols.iter().map(|&c| self.counts[c]).collect(),
        );
        out.condition_number = spectral_condition(&out.values);
        out
    }
}

/// Spectral condition number; NaN for non-square, NaN-containing, or
/// singular matrices.
pub fn spectral_condition(m: &DMatrix<f64>) -> f64 {
    if m.nrows() != m.ncols() || m.iter().any(|v| v.is_nan()) {
        return f64::NAN;
    }
    let svd = m.clone().svd(false, false);
    let max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let min = svd.singular_values.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 || !min.is_finite() {
        f64::NAN
    } else {
        max / min
    }
}

// ---------------------------------------------------------------------------
// descriptors
// ---------------------------------------------------------------------------

/// Names every behavior-measure conditional matrix the estimators and
/// identity checks consume. Time index conventions: conditioning on
/// `Z_{t-1}` at `t = 0` (or `Z_{t-2}` at `t = 1`) refers to the
/// pre-observation slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MatrixDescriptor {
    // plain POMDP
    /// `P(Z_t | a_t, Z_{t-1})`
    PZGivenAZprev { t: usize, a: usize },
    /// `P(Z_t, z_{t-1} | a_{t-1}, Z_{t-2})`, `t >= 1`
    PZzPrevGivenAZprev2 { t: usize, z_prev: usize, a_prev: usize },
    /// `P(r_t, z_t | a_t, Z_{t-1})`, rows over the reward support
    PRZGivenAZprev { t: usize, z: usize, a: usize },
    /// `P(Z_t)` as a column vector
    PZMarginal { t: usize },
    /// `P(U_t | a_t, Z_{t-1})` (population only)
    PUGivenAZprev { t: usize, a: usize },
    /// `P(Z_t | a_t, U_t)` (population only)
    PZGivenAU { t: usize, a: usize },
    /// `P(U_t, z_{t-1} | a_{t-1}, Z_{t-2})`, `t >= 1` (population only)
    PUzPrevGivenAZprev2 { t: usize, z_prev: usize, a_prev: usize },
    /// `P(A_t | Z_t)`
    PActionGivenZ { t: usize },
    // decoupled
    /// `P(O_t | z_t, a_t, Z_{t-1})`
    POGivenZAZprev { t: usize, z: usize, a: usize },
    /// `P(O_t, o_{t-1}, z_t | z_{t-1}, a_{t-1}, Z_{t-2})`, `t >= 1`
    POoPrevZGivenZAZprev2 {
        t: usize,
        o_prev: usize,
        z: usize,
        z_prev: usize,
        a_prev: usize,
    },
    /// `P(r_t, o_t | z_t, a_t, Z_{t-1})`, rows over the reward support
    PROGivenZAZprev { t: usize, o: usize, z: usize, a: usize },
    /// `P(O_0 | z_0)` as a column vector
    POGivenZ0 { z0: usize },
    /// `P(O_t | z_t, a_t, U_t)` (population only)
    POGivenZAU { t: usize, z: usize, a: usize },
    /// `P(U_t | z_t, a_t, Z_{t-1})` (population only)
    PUGivenZAZprev { t: usize, z: usize, a: usize },
    /// `P(U_t, z_t, o_{t-1} | z_{t-1}, a_{t-1}, Z_{t-2})`, `t >= 1`
    /// (population only)
    PUzOPrevGivenZAZprev2 {
        t: usize,
        z: usize,
        o_prev: usize,
        z_prev: usize,
        a_prev: usize,
    },
}

/// Window layout of a descriptor: which variables to trace, the row and
/// column variables, and the fixed target/conditioning coordinates.
pub(crate) struct WindowSpec {
    pub vars: Vec<Var>,
    pub row_var: Var,
    pub col_var: Option<Var>,
    /// Realized target-side coordinates (numerator only).
    pub fixed_target: Vec<(Var, usize)>,
    /// Realized conditioning coordinates (numerator and denominator).
    pub fixed_cond: Vec<(Var, usize)>,
}

fn prev_col(t: usize) -> Var {
    if t == 0 {
        Var::ZPre
    } else {
        Var::Z(t - 1)
    }
}

fn prev2_col(t: usize) -> Var {
    if t == 1 {
        Var::ZPre
    } else {
        Var::Z(t - 2)
    }
}

impl MatrixDescriptor {
    pub fn kind(&self) -> ModelKind {
        use MatrixDescriptor::*;
        match self {
            PZGivenAZprev { .. }
            | PZzPrevGivenAZprev2 { .. }
            | PRZGivenAZprev { .. }
            | PUGivenAZprev { .. }
            | PZGivenAU { .. }
            | PUzPrevGivenAZprev2 { .. } => ModelKind::Pomdp,
            PZMarginal { .. } | PActionGivenZ { .. } => ModelKind::Pomdp, // also valid decoupled
            POGivenZAZprev { .. }
            | POoPrevZGivenZAZprev2 { .. }
            | PROGivenZAZprev { .. }
            | POGivenZ0 { .. }
            | POGivenZAU { .. }
            | PUGivenZAZprev { .. }
            | PUzOPrevGivenZAZprev2 { .. } => ModelKind::Dpomdp,
        }
    }

    /// True when the descriptor references hidden states and therefore has no
    /// empirical counterpart.
    pub fn needs_hidden(&self) -> bool {
        use MatrixDescriptor::*;
        matches!(
            self,
            PUGivenAZprev { .. }
                | PZGivenAU { .. }
                | PUzPrevGivenAZprev2 { .. }
                | POGivenZAU { .. }
                | PUGivenZAZprev { .. }
                | PUzOPrevGivenZAZprev2 { .. }
        )
    }

    pub fn describe(&self) -> String {
        use MatrixDescriptor::*;
        match self {
            PZGivenAZprev { t, a } => format!("P(Z_{t} | a_{t}={a}, Z_{{{t}-1}})"),
            PZzPrevGivenAZprev2 { t, z_prev, a_prev } => format!(
                "P(Z_{t}, z_{{{t}-1}}={z_prev} | a_{{{t}-1}}={a_prev}, Z_{{{t}-2}})"
            ),
            PRZGivenAZprev { t, z, a } => {
                format!("P(r_{t}, z_{t}={z} | a_{t}={a}, Z_{{{t}-1}})")
            }
            PZMarginal { t } => format!("P(Z_{t})"),
            PUGivenAZprev { t, a } => format!("P(U_{t} | a_{t}={a}, Z_{{{t}-1}})"),
            PZGivenAU { t, a } => format!("P(Z_{t} | a_{t}={a}, U_{t})"),
            PUzPrevGivenAZprev2 { t, z_prev, a_prev } => format!(
                "P(U_{t}, z_{{{t}-1}}={z_prev} | a_{{{t}-1}}={a_prev}, Z_{{{t}-2}})"
            ),
            PActionGivenZ { t } => format!("P(A_{t} | Z_{t})"),
            POGivenZAZprev { t, z, a } => {
                format!("P(O_{t} | z_{t}={z}, a_{t}={a}, Z_{{{t}-1}})")
            }
            POoPrevZGivenZAZprev2 {
                t,
                o_prev,
                z,
                z_prev,
                a_prev,
            } => format!(
                "P(O_{t}, o_{{{t}-1}}={o_prev}, z_{t}={z} | z_{{{t}-1}}={z_prev}, a_{{{t}-1}}={a_prev}, Z_{{{t}-2}})"
            ),
            PROGivenZAZprev { t, o, z, a } => {
                format!("P(r_{t}, o_{t}={o} | z_{t}={z}, a_{t}={a}, Z_{{{t}-1}})")
            }
            POGivenZ0 { z0 } => format!("P(O_0 | z_0={z0})"),
            POGivenZAU { t, z, a } => format!("P(O_{t} | z_{t}={z}, a_{t}={a}, U_{t})"),
            PUGivenZAZprev { t, z, a } => {
                format!("P(U_{t} | z_{t}={z}, a_{t}={a}, Z_{{{t}-1}})")
            }
            PUzOPrevGivenZAZprev2 {
                t,
                z,
                o_prev,
                z_prev,
                a_prev,
            } => format!(
                "P(U_{t}, z_{t}={z}, o_{{{t}-1}}={o_prev} | z_{{{t}-1}}={z_prev}, a_{{{t}-1}}={a_prev}, Z_{{{t}-2}})"
            ),
        }
    }

    pub(crate) fn window_spec(&self) -> WindowSpec {
        use MatrixDescriptor::*;
        match *self {
            PZGivenAZprev { t, a } => WindowSpec {
                vars: vec![prev_col(t), Var::A(t), Var::Z(t)],
                row_var: Var::Z(t),
                col_var: Some(prev_col(t)),
                fixed_target: vec![],
                fixed_cond: vec![(Var::A(t), a)],
            },
            PZzPrevGivenAZprev2 { t, z_prev, a_prev } => WindowSpec {
                vars: vec![prev2_col(t), Var::A(t - 1), Var::Z(t - 1), Var::Z(t)],
                row_var: Var::Z(t),
                col_var: Some(prev2_col(t)),
                fixed_target: vec![(Var::Z(t - 1), z_prev)],
                fixed_cond: vec![(Var::A(t - 1), a_prev)],
            },
            PRZGivenAZprev { t, z, a } => WindowSpec {
                vars: vec![prev_col(t), Var::Z(t), Var::A(t), Var::R(t)],
                row_var: Var::R(t),
                col_var: Some(prev_col(t)),
                fixed_target: vec![(Var::Z(t), z)],
                fixed_cond: vec![(Var::A(t), a)],
            },
            PZMarginal { t } => WindowSpec {
                vars: vec![Var::Z(t)],
                row_var: Var::Z(t),
                col_var: None,
                fixed_target: vec![],
                fixed_cond: vec![],
            },
            PUGivenAZprev { t, a } => WindowSpec {
                vars: vec![prev_col(t), Var::A(t), Var::U(t)],
                row_var: Var::U(t),
                col_var: Some(prev_col(t)),
                fixed_target: vec![],
                fixed_cond: vec![(Var::A(t), a)],
            },
            PZGivenAU { t, a } => WindowSpec {
                vars: vec![Var::U(t), Var::A(t), Var::Z(t)],
                row_var: Var::Z(t),
                col_var: Some(Var::U(t)),
                fixed_target: vec![],
                fixed_cond: vec![(Var::A(t), a)],
            },
            PUzPrevGivenAZprev2 { t, z_prev, a_prev } => WindowSpec {
                vars: vec![prev2_col(t), Var::A(t - 1), Var::Z(t - 1), Var::U(t)],
                row_var: Var::U(t),
                col_var: Some(prev2_col(t)),
                fixed_target: vec![(Var::Z(t - 1), z_prev)],
                fixed_cond: vec![(Var::A(t - 1), a_prev)],
            },
            PActionGivenZ { t } => WindowSpec {
                vars: vec![Var::Z(t), Var::A(t)],
                row_var: Var::A(t),
                col_var: Some(Var::Z(t)),
                fixed_target: vec![],
                fixed_cond: vec![],
            },
            POGivenZAZprev { t, z, a } => WindowSpec {
                vars: vec![prev_col(t), Var::Z(t), Var::A(t), Var::O(t)],
                row_var: Var::O(t),
                col_var: Some(prev_col(t)),
                fixed_target: vec![],
                fixed_cond: vec![(Var::Z(t), z), (Var::A(t), a)],
            },
            POoPrevZGivenZAZprev2 {
                t,
                o_prev,
                z,
                z_prev,
                a_prev,
            } => WindowSpec {
                vars: vec![
                    prev2_col(t),
                    Var::Z(t - 1),
                    Var::O(t - 1),
                    Var::A(t - 1),
                    Var::Z(t),
                    Var::O(t),
                ],
                row_var: Var::O(t),
                col_var: Some(prev2_col(t)),
                fixed_target: vec![(Var::O(t - 1), o_prev), (Var::Z(t), z)],
                fixed_cond: vec![(Var::Z(t - 1), z_prev), (Var::A(t - 1), a_prev)],
            },
            PROGivenZAZprev { t, o, z, a } => WindowSpec {
                vars: vec![prev_col(t), Var::Z(t), Var::O(t), Var::A(t), Var::R(t)],
                row_var: Var::R(t),
                col_var: Some(prev_col(t)),
                fixed_target: vec![(Var::O(t), o)],
                fixed_cond: vec![(Var::Z(t), z), (Var::A(t), a)],
            },
            POGivenZ0 { z0 } => WindowSpec {
                vars: vec![Var::Z(0), Var::O(0)],
                row_var: Var::O(0),
                col_var: None,
                fixed_target: vec![],
                fixed_cond: vec![(Var::Z(0), z0)],
            },
            POGivenZAU { t, z, a } => WindowSpec {
                vars: vec![Var::U(t), Var::Z(t), Var::A(t), Var::O(t)],
                row_var: Var::O(t),
                col_var: Some(Var::U(t)),
                fixed_target: vec![],
                fixed_cond: vec![(Var::Z(t), z), (Var::A(t), a)],
            },
            PUGivenZAZprev { t, z, a } => WindowSpec {
                vars: vec![prev_col(t), Var::Z(t), Var::A(t), Var::U(t)],
                row_var: Var::U(t),
                col_var: Some(prev_col(t)),
                fixed_target: vec![],
                fixed_cond: vec![(Var::Z(t), z), (Var::A(t), a)],
            },
            PUzOPrevGivenZAZprev2 {
                t,
                z,
                o_prev,
                z_prev,
                a_prev,
            } => WindowSpec {
                vars: vec![
                    prev2_col(t),
                    Var::Z(t - 1),
                    Var::O(t - 1),
                    Var::A(t - 1),
                    Var::Z(t),
                    Var::U(t),
                ],
                row_var: Var::U(t),
                col_var: Some(prev2_col(t)),
                fixed_target: vec![(Var::Z(t), z), (Var::O(t - 1), o_prev)],
                fixed_cond: vec![(Var::Z(t - 1), z_prev), (Var::A(t - 1), a_prev)],
            },
        }
    }

    /// Validates the descriptor against space sizes and the model kind.
    pub fn check(&self, spaces: &SpaceSpec, kind: ModelKind) -> Result<()> {
        use MatrixDescriptor::*;
        let fail = |msg: String| Err(Error::DescriptorOutOfRange(msg));
        let own_kind = self.kind();
        let kind_ok = match self {
            PZMarginal { .. } | PActionGivenZ { .. } => true,
            _ => own_kind == kind,
        };
        if !kind_ok {
            return fail(format!("{} does not apply to {:?} models", self.describe(), kind));
        }
        let n_o = spaces.n_o.unwrap_or(0);
        let ok = match *self {
            PZGivenAZprev { a, .. } | PZGivenAU { a, .. } | PUGivenAZprev { a, .. } => {
                a < spaces.n_a
            }
            PZzPrevGivenAZprev2 { t, z_prev, a_prev }
            | PUzPrevGivenAZprev2 { t, z_prev, a_prev } => {
                t >= 1 && z_prev < spaces.n_z && a_prev < spaces.n_a
            }
            PRZGivenAZprev { z, a, .. } => z < spaces.n_z && a < spaces.n_a,
            PZMarginal { .. } | PActionGivenZ { .. } => true,
            POGivenZAZprev { z, a, .. } | POGivenZAU { z, a, .. } | PUGivenZAZprev { z, a, .. } => {
                z < spaces.n_z && a < spaces.n_a
            }
            POoPrevZGivenZAZprev2 {
                t,
                o_prev,
                z,
                z_prev,
                a_prev,
            } => {
                t >= 1
                    && o_prev < n_o
                    && z < spaces.n_z
                    && z_prev < spaces.n_z
                    && a_prev < spaces.n_a
            }
            PROGivenZAZprev { o, z, a, .. } => o < n_o && z < spaces.n_z && a < spaces.n_a,
            POGivenZ0 { z0 } => z0 < spaces.n_z,
            PUzOPrevGivenZAZprev2 {
                t,
                z,
                o_prev,
                z_prev,
                a_prev,
            } => {
                t >= 1
                    && z < spaces.n_z
                    && o_prev < n_o
                    && z_prev < spaces.n_z
                    && a_prev < spaces.n_a
            }
        };
        if ok {
            Ok(())
        } else {
            fail(format!("{} out of range for the given spaces", self.describe()))
        }
    }
}

// ---------------------------------------------------------------------------
// empirical estimation
// ---------------------------------------------------------------------------

fn record_value(rec: &ObservableRecord, var: Var) -> usize {
    match var {
        Var::ZPre => rec.z_pre,
        Var::Z(t) => rec.z[t],
        Var::O(t) => rec.o[t],
        Var::A(t) => rec.a[t],
        Var::R(t) => rec.r_idx[t],
        Var::U(_) => unreachable!("hidden variables have no empirical value"),
    }
}

fn empirical_var_dim(shape: &DatasetShape, var: Var) -> usize {
    match var {
        Var::ZPre | Var::Z(_) => shape.n_z,
        Var::O(_) => shape.n_o.unwrap_or(0),
        Var::A(_) => shape.n_a,
        Var::R(_) => shape.reward_values.len(),
        Var::U(_) => 0,
    }
}

/// Empirical conditional-probability matrix with Laplace smoothing
/// `(count(x, y) + eps) / (count(y) + eps * n_rows)`. With `eps = 0`,
/// zero-count conditioning columns are NaN-marked.
pub fn empirical_cond_matrix(
    records: &[ObservableRecord],
    shape: &DatasetShape,
    descriptor: &MatrixDescriptor,
    smoothing: f64,
) -> Result<CondProbMatrix> {
    if records.is_empty() {
        return Err(Error::EmptyData);
    }
    if descriptor.needs_hidden() {
        return Err(Error::DescriptorOutOfRange(format!(
            "{} references hidden states and cannot be estimated from observable data",
            descriptor.describe()
        )));
    }
    let horizon = records[0].horizon();
    let spec = descriptor.window_spec();
    if spec.vars.iter().map(Var::time).max().unwrap_or(0) > horizon {
        return Err(Error::DescriptorOutOfRange(format!(
            "{} exceeds data horizon {horizon}",
            descriptor.describe()
        )));
    }

    let n_rows = empirical_var_dim(shape, spec.row_var);
    let n_cols = spec
        .col_var
        .map(|v| empirical_var_dim(shape, v))
        .unwrap_or(1);
    let mut joint = DMatrix::<f64>::zeros(n_rows, n_cols);
    let mut cond_counts = vec![0u64; n_cols];

    for rec in records {
        if spec
            .fixed_cond
            .iter()
            .any(|&(v, val)| record_value(rec, v) != val)
        {
            continue;
        }
        let col = spec.col_var.map(|v| record_value(rec, v)).unwrap_or(0);
        cond_counts[col] += 1;
        if spec
            .fixed_target
            .iter()
            .any(|&(v, val)| record_value(rec, v) != val)
        {
            continue;
        }
        joint[(record_value(rec, spec.row_var), col)] += 1.0;
    }

    let mut values = DMatrix::<f64>::zeros(n_rows, n_cols);
    for c in 0..n_cols {
        let denom = cond_counts[c] as f64 + smoothing * n_rows as f64;
        if denom <= 0.0 {
            for r in 0..n_rows {
                values[(r, c)] = f64::NAN;
            }
        } else {
            for r in 0..n_rows {
                values[(r, c)] = (joint[(r, c)] + smoothing) / denom;
            }
        }
    }

    let row_labels = (0..n_rows).map(|r| vec![r]).collect();
    let col_labels = if spec.col_var.is_some() {
        (0..n_cols).map(|c| vec![c]).collect()
    } else {
        vec![vec![]]
    };
    let mut out = CondProbMatrix::new(
        descriptor.describe(),
        row_labels,
        col_labels,
        values,
        cond_counts,
    );
    out.condition_number = spectral_condition(&out.values);
    Ok(out)
}

/// Time-pooled variant of [`empirical_cond_matrix`]: descriptors at `t >= 1`
/// accumulate counts over every time shift `1..=L` that fits the data
/// horizon; `t = 0` descriptors (anchored on the pre-observation slot) are
/// never pooled.
pub fn empirical_cond_matrix_pooled(
    records: &[ObservableRecord],
    shape: &DatasetShape,
    descriptor: &MatrixDescriptor,
    smoothing: f64,
) -> Result<CondProbMatrix> {
    if records.is_empty() {
        return Err(Error::EmptyData);
    }
    let horizon = records[0].horizon();
    let (t, shifted): (usize, Box<dyn Fn(usize) -> MatrixDescriptor>) = match *descriptor {
        MatrixDescriptor::PZGivenAZprev { t, a } if t >= 1 => {
            (t, Box::new(move |tt| MatrixDescriptor::PZGivenAZprev { t: tt, a }))
        }
        MatrixDescriptor::PZzPrevGivenAZprev2 { t, z_prev, a_prev } if t >= 2 => (
            t,
            Box::new(move |tt| MatrixDescriptor::PZzPrevGivenAZprev2 { t: tt, z_prev, a_prev }),
        ),
        MatrixDescriptor::PRZGivenAZprev { t, z, a } if t >= 1 => (
            t,
            Box::new(move |tt| MatrixDescriptor::PRZGivenAZprev { t: tt, z, a }),
        ),
        MatrixDescriptor::POGivenZAZprev { t, z, a } if t >= 1 => (
            t,
            Box::new(move |tt| MatrixDescriptor::POGivenZAZprev { t: tt, z, a }),
        ),
        MatrixDescriptor::POoPrevZGivenZAZprev2 {
            t,
            o_prev,
            z,
            z_prev,
            a_prev,
        } if t >= 2 => (
            t,
            Box::new(move |tt| MatrixDescriptor::POoPrevZGivenZAZprev2 {
                t: tt,
                o_prev,
                z,
                z_prev,
                a_prev,
            }),
        ),
        MatrixDescriptor::PROGivenZAZprev { t, o, z, a } if t >= 1 => (
            t,
            Box::new(move |tt| MatrixDescriptor::PROGivenZAZprev { t: tt, o, z, a }),
        ),
        _ => return empirical_cond_matrix(records, shape, descriptor, smoothing),
    };
    // the shifted window must not reach the pre-observation slot differently:
    // t >= 1 single-lag descriptors shift over 1..=L, two-lag over 2..=L
    let min_t = if matches!(
        descriptor,
        MatrixDescriptor::PZzPrevGivenAZprev2 { .. } | MatrixDescriptor::POoPrevZGivenZAZprev2 { .. }
    ) {
        2
    } else {
        1
    };
    let _ = t;
    let mut acc: Option<(DMatrix<f64>, Vec<u64>)> = None;
    for tt in min_t..=horizon {
        let m = empirical_cond_matrix(records, shape, &shifted(tt), 0.0)?;
        // recover raw joint counts: values * cond_count per column
        match acc.as_mut() {
            None => {
                let mut joint = DMatrix::zeros(m.values.nrows(), m.values.ncols());
                for c in 0..m.values.ncols() {
                    for r in 0..m.values.nrows() {
                        let v = m.values[(r, c)];
                        joint[(r, c)] = if v.is_nan() { 0.0 } else { v * m.counts[c] as f64 };
                    }
                }
                acc = Some((joint, m.counts.clone()));
            }
            Some((joint, counts)) => {
                for c in 0..m.values.ncols() {
                    for r in 0..m.values.nrows() {
                        let v = m.values[(r, c)];
                        if !v.is_nan() {
                            joint[(r, c)] += v * m.counts[c] as f64;
                        }
                    }
                    counts[c] += m.counts[c];
                }
            }
        }
    }
    let (joint, counts) = acc.expect("at least one time shift fits");
    let n_rows = joint.nrows();
    let mut values = DMatrix::<f64>::zeros(n_rows, joint.ncols());
    for c in 0..joint.ncols() {
        let denom = counts[c] as f64 + smoothing * n_rows as f64;
        if denom <= 0.0 {
            for r in 0..n_rows {
                values[(r, c)] = f64::NAN;
            }
        } else {
            for r in 0..n_rows {
                values[(r, c)] = (joint[(r, c)] + smoothing) / denom;
            }
        }
    }
    let row_labels = (0..n_rows).map(|r| vec![r]).collect();
    let col_labels = (0..joint.ncols()).map(|c| vec![c]).collect();
    let mut out = CondProbMatrix::new(
        format!("{} (time-pooled)", descriptor.describe()),
        row_labels,
        col_labels,
        values,
        counts,
    );
    out.condition_number = spectral_condition(&out.values);
    Ok(out)
}

// ---------------------------------------------------------------------------
// matrix source
// ---------------------------------------------------------------------------

/// Where estimators read their conditional matrices from: exact population
/// quantities or empirical counts.
#[derive(Clone, Copy)]
pub enum MatrixSource<'a> {
    Population {
        model: ModelRef<'a>,
        behavior: &'a BehaviorPolicy,
    },
    Empirical {
        records: &'a [ObservableRecord],
        shape: &'a DatasetShape,
        smoothing: f64,
        /// Pool counts across time steps `1..=L` (the chain matrices are
        /// time-indexed by the theorems; pooling trades that fidelity for
        /// variance reduction).
        pool_time: bool,
    },
}

impl<'a> MatrixSource<'a> {
    pub fn matrix(&self, descriptor: &MatrixDescriptor) -> Result<CondProbMatrix> {
        match self {
            MatrixSource::Population { model, behavior } => {
                oracle::population_matrix(*model, behavior, descriptor)
            }
            MatrixSource::Empirical {
                records,
                shape,
                smoothing,
                pool_time,
            } => {
                if *pool_time {
                    empirical_cond_matrix_pooled(records, shape, descriptor, *smoothing)
                } else {
                    empirical_cond_matrix(records, shape, descriptor, *smoothing)
                }
            }
        }
    }

    pub fn is_population(&self) -> bool {
        matches!(self, MatrixSource::Population { .. })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            MatrixSource::Population { model, .. } => model.kind(),
            MatrixSource::Empirical { shape, .. } => shape.kind(),
        }
    }

    pub fn n_z(&self) -> usize {
        match self {
            MatrixSource::Population { model, .. } => model.spaces().n_z,
            MatrixSource::Empirical { shape, .. } => shape.n_z,
        }
    }

    pub fn n_o(&self) -> Option<usize> {
        match self {
            MatrixSource::Population { model, .. } => model.spaces().n_o,
            MatrixSource::Empirical { shape, .. } => shape.n_o,
        }
    }

    pub fn n_a(&self) -> usize {
        match self {
            MatrixSource::Population { model, .. } => model.spaces().n_a,
            MatrixSource::Empirical { shape, .. } => shape.n_a,
        }
    }

    pub fn n_u(&self) -> Option<usize> {
        match self {
            MatrixSource::Population { model, .. } => Some(model.spaces().n_u),
            MatrixSource::Empirical { .. } => None,
        }
    }

    pub fn reward_values(&self) -> &'a [f64] {
        match self {
            MatrixSource::Population { model, .. } => model.reward_values(),
            MatrixSource::Empirical { shape, .. } => &shape.reward_values,
        }
    }
}

// ---------------------------------------------------------------------------
// linear solving
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SolvedWeights {
    pub matrix: DMatrix<f64>,
    /// Condition number of the solved (left-hand) matrix.
    pub condition: f64,
}

/// Returns `X` minimizing `||A X - B||_F^2 + ridge ||X||_F^2`, i.e. the
/// product `A^-1 B` realized without explicit inversion when `ridge = 0`
/// and `A` is square.
///
/// With `ridge = 0`, a condition number above `condition_cap` is a hard
/// error naming the offending matrix.
pub fn solve_weights(
    a: &CondProbMatrix,
    b: &DMatrix<f64>,
    ridge: f64,
    condition_cap: f64,
) -> Result<SolvedWeights> {
    if a.has_nan() {
        return Err(Error::SingularMatrix {
            descriptor: format!("{} (NaN-marked columns)", a.descriptor),
            condition: f64::NAN,
        });
    }
    if b.iter().any(|v| v.is_nan()) {
        return Err(Error::SingularMatrix {
            descriptor: "right-hand side contains NaN-marked columns".into(),
            condition: f64::NAN,
        });
    }
    let am = &a.values;
    let condition = if am.nrows() == am.ncols() {
        a.condition_number
    } else {
        f64::NAN
    };
    if ridge == 0.0 {
        if am.nrows() == am.ncols() {
            if !(condition <= condition_cap) {
                return Err(Error::SingularMatrix {
                    descriptor: a.descriptor.clone(),
                    condition,
                });
            }
            if let Some(x) = am.clone().lu().solve(b) {
                return Ok(SolvedWeights {
                    matrix: x,
                    condition,
                });
            }
            return Err(Error::SingularMatrix {
                descriptor: a.descriptor.clone(),
                condition,
            });
        }
        if am.nrows() < am.ncols() {
            return Err(Error::SingularMatrix {
                descriptor: format!("{} is wide ({}x{})", a.descriptor, am.nrows(), am.ncols()),
                condition,
            });
        }
    }
    // least squares / ridge through the normal equations
    let ata = am.transpose() * am;
    let atb = am.transpose() * b;
    let n = ata.nrows();
    let reg = &ata + DMatrix::<f64>::identity(n, n) * ridge;
    match reg.lu().solve(&atb) {
        Some(x) => Ok(SolvedWeights {
            matrix: x,
            condition,
        }),
        None => Err(Error::SingularMatrix {
            descriptor: a.descriptor.clone(),
            condition,
        }),
    }
}

// ---------------------------------------------------------------------------
// index-set selection
// ---------------------------------------------------------------------------

/// Per-position row/column index subsets for the decoupled estimator:
/// `k[i]` subsets the observation axis of position `i`'s invertible block,
/// `j[i]` subsets its column axis, i.e. the `Z_{i-1}` values (`j[0]`
/// subsets the pre-observation slot).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSets {
    pub k: Vec<Vec<usize>>,
    pub j: Vec<Vec<usize>>,
}

impl IndexSets {
    /// Full sets (no subsetting) for `n_u = n_z = n_o`.
    pub fn full(n_u: usize, horizon: usize) -> Self {
        let all: Vec<usize> = (0..n_u).collect();
        IndexSets {
            k: vec![all.clone(); horizon + 1],
            j: vec![all; horizon + 1],
        }
    }

    pub fn validate(&self, n_u: usize, n_z: usize, n_o: usize, horizon: usize) -> Result<()> {
        if self.k.len() != horizon + 1 || self.j.len() != horizon + 1 {
            return Err(Error::InvalidIndexSets(format!(
                "need {} positions, got k={}, j={}",
                horizon + 1,
                self.k.len(),
                self.j.len()
            )));
        }
        for (name, sets, bound) in [("k", &self.k, n_o), ("j", &self.j, n_z)] {
            for (i, set) in sets.iter().enumerate() {
                if set.len() != n_u {
                    return Err(Error::InvalidIndexSets(format!(
                        "{name}[{i}] has size {}, need {n_u}",
                        set.len()
                    )));
                }
                let mut seen = vec![false; bound];
                for &idx in set {
                    if idx >= bound || seen[idx] {
                        return Err(Error::InvalidIndexSets(format!(
                            "{name}[{i}] index {idx} out of range or repeated"
                        )));
                    }
                    seen[idx] = true;
                }
            }
        }
        Ok(())
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(cur.clone());
        // next lexicographic combination
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        cur[i] += 1;
        for l in i + 1..k {
            cur[l] = cur[l - 1] + 1;
        }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let mut out: usize = 1;
    for i in 0..k {
        out = out.saturating_mul(n - i) / (i + 1);
    }
    out
}

/// Worst condition number of the `(K, J)` submatrix across all reachable
/// `(z, a)` contexts at one chain position; NaN-context matrices are skipped.
fn position_score(contexts: &[CondProbMatrix], k: &[usize], j: &[usize]) -> f64 {
    let mut worst: f64 = 0.0;
    let mut any = false;
    for m in contexts {
        if m.has_nan() {
            continue;
        }
        any = true;
        let sub = m.submatrix(k, j);
        let c = sub.condition_number;
        if c.is_nan() {
            return f64::INFINITY;
        }
        worst = worst.max(c);
    }
    if any {
        worst
    } else {
        f64::INFINITY
    }
}

/// Chooses, per chain position, the row/column subsets minimizing the worst
/// condition number of the invertible block across `(z, a)` contexts.
/// Exhaustive when the candidate count is small, greedy single-swap descent
/// otherwise; ties break toward lexicographically smaller sets.
pub fn select_index_sets(source: &MatrixSource<'_>, horizon: usize) -> Result<IndexSets> {
    let n_z = source.n_z();
    let n_o = source
        .n_o()
        .ok_or_else(|| Error::InvalidParameter("index sets need a decoupled source".into()))?;
    let n_u = match source.n_u() {
        Some(n) => n,
        // empirical sources have no hidden-state size; the caller must know
        // it, and the theorems require n_u <= min(n_z, n_o). Default to the
        // largest feasible square block.
        None => n_z.min(n_o),
    };
    if n_z < n_u || n_o < n_u {
        return Err(Error::InvalidParameter(format!(
            "need n_z ({n_z}) and n_o ({n_o}) >= n_u ({n_u})"
        )));
    }
    let n_a = source.n_a();

    let mut k_sets = Vec::with_capacity(horizon + 1);
    let mut j_sets = Vec::with_capacity(horizon + 1);
    for i in 0..=horizon {
        let mut contexts = Vec::new();
        for z in 0..n_z {
            for a in 0..n_a {
                contexts.push(source.matrix(&MatrixDescriptor::POGivenZAZprev { t: i, z, a })?);
            }
        }
        let exhaustive = binomial(n_o, n_u).saturating_mul(binomial(n_z, n_u)) <= 10_000;
        let (best_k, best_j, best_score) = if exhaustive {
            let mut best = (Vec::new(), Vec::new(), f64::INFINITY);
            for k in combinations(n_o, n_u) {
                for j in combinations(n_z, n_u) {
                    let score = position_score(&contexts, &k, &j);
                    if score < best.2 {
                        best = (k.clone(), j, score);
                    }
                }
            }
            best
        } else {
            let mut k: Vec<usize> = (0..n_u).collect();
            let mut j: Vec<usize> = (0..n_u).collect();
            let mut score = position_score(&contexts, &k, &j);
            loop {
                let mut improved = false;
                for pos in 0..n_u {
                    for cand in 0..n_o {
                        if k.contains(&cand) {
                            continue;
                        }
                        let mut k2 = k.clone();
                        k2[pos] = cand;
                        k2.sort_unstable();
                        let s = position_score(&contexts, &k2, &j);
                        if s < score {
                            k = k2;
                            score = s;
                            improved = true;
                        }
                    }
                }
                for pos in 0..n_u {
                    for cand in 0..n_z {
                        if j.contains(&cand) {
                            continue;
                        }
                        let mut j2 = j.clone();
                        j2[pos] = cand;
                        j2.sort_unstable();
                        let s = position_score(&contexts, &k, &j2);
                        if s < score {
                            j = j2;
                            score = s;
                            improved = true;
                        }
                    }
                }
                if !improved {
                    break;
                }
            }
            (k, j, score)
        };
        if !best_score.is_finite() {
            return Err(Error::SingularMatrix {
                descriptor: format!("all (K, J) candidates at position {i} are singular"),
                condition: best_score,
            });
        }
        k_sets.push(best_k);
        j_sets.push(best_j);
    }
    Ok(IndexSets {
        k: k_sets,
        j: j_sets,
    })
}

// ---------------------------------------------------------------------------
// empirical behavior action probabilities
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextMode {
    /// The full observable history through step `t` (the literal importance
    /// weights).
    FullHistory,
    /// Only the step-`t` observation(s); denser contexts at long horizons.
    LastObservation,
}

#[derive(Debug, Clone)]
pub struct ActionStats {
    pub probs: Vec<f64>,
    pub count: u64,
    /// Below the minimum count; excluded from importance weighting.
    pub excluded: bool,
}

/// Empirical `P(a_t | context)` tables per step.
#[derive(Debug, Clone)]
pub struct ActionProbTable {
    pub mode: ContextMode,
    pub min_count: u64,
    pub per_step: Vec<BTreeMap<Vec<usize>, ActionStats>>,
    pub excluded_contexts: usize,
}

impl ActionProbTable {
    pub fn context_key(mode: ContextMode, rec: &ObservableRecord, t: usize) -> Vec<usize> {
        match mode {
            ContextMode::LastObservation => {
                if rec.o.is_empty() {
                    vec![rec.z[t]]
                } else {
                    vec![rec.z[t], rec.o[t]]
                }
            }
            ContextMode::FullHistory => {
                let mut key = Vec::with_capacity(3 * t + 2);
                for i in 0..=t {
                    key.push(rec.z[i]);
                    if !rec.o.is_empty() {
                        key.push(rec.o[i]);
                    }
                    if i < t {
                        key.push(rec.a[i]);
                    }
                }
                key
            }
        }
    }

    pub fn lookup(&self, t: usize, key: &[usize]) -> Option<&ActionStats> {
        self.per_step.get(t).and_then(|m| m.get(key))
    }
}

/// Empirical action frequencies per context per step; contexts with fewer
/// than `min_count` visits are flagged and excluded from downstream
/// importance weighting.
pub fn behavior_action_probs(
    records: &[ObservableRecord],
    n_a: usize,
    mode: ContextMode,
    min_count: u64,
) -> Result<ActionProbTable> {
    if records.is_empty() {
        return Err(Error::EmptyData);
    }
    let horizon = records[0].horizon();
    let mut per_step: Vec<BTreeMap<Vec<usize>, Vec<u64>>> = vec![BTreeMap::new(); horizon + 1];
    for rec in records {
        for t in 0..=horizon {
            let key = ActionProbTable::context_key(mode, rec, t);
            let counts = per_step[t].entry(key).or_insert_with(|| vec![0; n_a]);
            counts[rec.a[t]] += 1;
        }
    }
    let mut excluded_contexts = 0;
    let per_step = per_step
        .into_iter()
        .map(|step| {
            step.into_iter()
                .map(|(key, counts)| {
                    let total: u64 = counts.iter().sum();
                    let excluded = total < min_count;
                    if excluded {
                        excluded_contexts += 1;
                    }
                    let probs = counts
                        .iter()
                        .map(|&c| c as f64 / total as f64)
                        .collect();
                    (
                        key,
                        ActionStats {
                            probs,
                            count: total,
                            excluded,
                        },
                    )
                })
                .collect()
        })
        .collect();
    Ok(ActionProbTable {
        mode,
        min_count,
        per_step,
        excluded_contexts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combinations_are_lexicographic_and_complete() {
        let combos = combinations(4, 2);
        assert_eq!(
            combos,
            alloc::vec![
                alloc::vec![0, 1],
                alloc::vec![0, 2],
                alloc::vec![0, 3],
                alloc::vec![1, 2],
                alloc::vec![1, 3],
                alloc::vec![2, 3]
            ]
        );
        assert_eq!(combinations(5, 3).len(), 10);
        assert_eq!(combinations(3, 3), alloc::vec![alloc::vec![0, 1, 2]]);
    }

    #[test]
    fn binomial_matches_enumeration() {
        for n in 1..8 {
            for k in 1..=n {
                assert_eq!(binomial(n, k), combinations(n, k).len(), "n={n} k={k}");
            }
        }
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let a = CondProbMatrix {
            descriptor: "identity".into(),
            row_labels: alloc::vec![alloc::vec![0], alloc::vec![1]],
            col_labels: alloc::vec![alloc::vec![0], alloc::vec![1]],
            values: DMatrix::identity(2, 2),
            counts: alloc::vec![0, 0],
            condition_number: 1.0,
        };
        let b = DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.6, 0.4]);
        let solved = solve_weights(&a, &b, 0.0, 1e8).unwrap();
        assert!((solved.matrix.clone() - b).abs().max() < 1e-14);
    }

    #[test]
    fn singular_solve_names_the_matrix() {
        let a = CondProbMatrix {
            descriptor: "P(Z_1 | a_1=0, Z_0)".into(),
            row_labels: alloc::vec![alloc::vec![0], alloc::vec![1]],
            col_labels: alloc::vec![alloc::vec![0], alloc::vec![1]],
            values: DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]),
            counts: alloc::vec![0, 0],
            condition_number: f64::NAN,
        };
        let b = DMatrix::identity(2, 2);
        let err = solve_weights(&a, &b, 0.0, 1e8).unwrap_err();
        match err {
            Error::SingularMatrix { descriptor, .. } => {
                assert!(descriptor.contains("P(Z_1"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
