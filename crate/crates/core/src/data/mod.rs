//! Patient cohorts: hourly discretization, imputation, encoding,
//! normalization, synthetic generation and stratified folds.

mod folds;
pub mod io;
mod preprocess;
mod synthetic;

pub use folds::{stratified_kfold, FoldPlan};
pub use preprocess::{
    denormalize, discretize, encode_and_normalize, fit_stats, forward_impute, preprocess_cohort, CohortStats, Encoded,
    Event, STD_FLOOR,
};
pub use synthetic::{generate_synthetic, SyntheticCohort, SyntheticSpec};

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Hours per record under the default configuration.
pub const DEFAULT_HOURS: usize = 24;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unknown variable '{0}'")]
    UnknownVariable(String),
    #[error("negative timestamp {time} for variable '{variable}'")]
    NegativeTimestamp { variable: String, time: f64 },
    #[error("timestamp {time} for variable '{variable}' is outside the {horizon}-hour horizon")]
    OutOfHorizon { variable: String, time: f64, horizon: usize },
    #[error("cannot parse value '{value}' for continuous variable '{variable}'")]
    BadValue { variable: String, value: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("record '{0}' still has missing cells; impute before encoding")]
    NotImputed(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("class {class} has {count} members, fewer than k = {k}")]
    ClassTooSmall { class: u8, count: usize, k: usize },
    #[error("invalid fold plan: {0}")]
    InvalidFolds(String),
    #[error("label for patient '{id}' must be 0 or 1, got {label}")]
    BadLabel { id: String, label: String },
}

/// One patient: an hours × variables grid of raw values with a missingness mask.
///
/// Categorical cells hold the vocabulary index as a float; `-1` marks a value
/// outside the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub hours: usize,
    pub vars: usize,
    pub grid: Vec<f64>,
    pub missing: Vec<bool>,
    pub label: u8,
}

impl PatientRecord {
    /// All cells missing.
    pub fn empty(patient_id: impl Into<String>, hours: usize, vars: usize, label: u8) -> Self {
        PatientRecord {
            patient_id: patient_id.into(),
            hours,
            vars,
            grid: vec![0.0; hours * vars],
            missing: vec![true; hours * vars],
            label,
        }
    }

    pub fn get(&self, hour: usize, var: usize) -> Option<f64> {
        let i = hour * self.vars + var;
        (!self.missing[i]).then_some(self.grid[i])
    }

    pub fn set(&mut self, hour: usize, var: usize, value: f64) {
        let i = hour * self.vars + var;
        self.grid[i] = value;
        self.missing[i] = false;
    }

    pub fn is_dense(&self) -> bool {
        !self.missing.iter().any(|&m| m)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariableKind {
    Continuous,
    Categorical { vocab: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: VariableKind,
}

/// Raw variables in column order; categorical variables expand to one-hot groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSchema {
    pub variables: Vec<VariableSpec>,
}

impl VariableSchema {
    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    fn group_width(kind: &VariableKind) -> usize {
        match kind {
            VariableKind::Continuous => 1,
            VariableKind::Categorical { vocab } => vocab.len(),
        }
    }

    pub fn encoded_width(&self) -> usize {
        self.variables.iter().map(|v| Self::group_width(&v.kind)).sum()
    }

    /// Encoded column range `[start, end)` of each raw variable.
    pub fn column_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.variables
            .iter()
            .map(|v| {
                let w = Self::group_width(&v.kind);
                let r = start..start + w;
                start += w;
                r
            })
            .collect()
    }

    /// Encoded column names: the variable name, or `name=value` for a one-hot bit.
    pub fn encoded_names(&self) -> Vec<String> {
        self.variables
            .iter()
            .flat_map(|v| match &v.kind {
                VariableKind::Continuous => vec![v.name.clone()],
                VariableKind::Categorical { vocab } => vocab.iter().map(|c| format!("{}={c}", v.name)).collect(),
            })
            .collect()
    }

    /// Whether each encoded column is a continuous (z-normalized) column.
    pub fn continuous_columns(&self) -> Vec<bool> {
        self.variables
            .iter()
            .flat_map(|v| {
                let cont = matches!(v.kind, VariableKind::Continuous);
                std::iter::repeat_n(cont, Self::group_width(&v.kind))
            })
            .collect()
    }
}
