use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, PatientRecord, VariableKind, VariableSchema, VariableSpec, DEFAULT_HOURS};

/// Parameters of the synthetic cohort generator.
///
/// Continuous values are Gaussian with a covariance shared by both classes
/// (a per-patient offset plus hourly noise); positives are shifted by
/// `separation` standard units along a random subset of variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub hours: usize,
    /// Raw variable count, categorical ones included.
    pub variables: usize,
    pub categorical: usize,
    pub vocab_size: usize,
    pub missing_rate: f64,
    pub separation: f64,
    /// Fraction of continuous variables that carry the class shift.
    pub informative_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 7,
            n_pos: 199,
            n_neg: 522,
            hours: DEFAULT_HOURS,
            variables: 56,
            categorical: 4,
            vocab_size: 3,
            missing_rate: 0.3,
            separation: 1.0,
            informative_fraction: 0.25,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::InvalidSpec(m));
        if self.n_pos < 1 || self.n_neg < 1 {
            return fail(format!("n_pos and n_neg must be >= 1 (got {}, {})", self.n_pos, self.n_neg));
        }
        if self.hours < 1 || self.variables < 1 {
            return fail("hours and variables must be >= 1".into());
        }
        if self.categorical > self.variables {
            return fail(format!("{} categorical of {} variables", self.categorical, self.variables));
        }
        if self.categorical > 0 && self.vocab_size < 2 {
            return fail("vocab_size must be >= 2".into());
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return fail(format!("missing_rate {} outside [0, 1)", self.missing_rate));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return fail(format!("separation {} must be finite and >= 0", self.separation));
        }
        if !(0.0..=1.0).contains(&self.informative_fraction) {
            return fail(format!("informative_fraction {} outside [0, 1]", self.informative_fraction));
        }
        Ok(())
    }

    pub fn schema(&self) -> VariableSchema {
        let n_cont = self.variables - self.categorical;
        let vocab: Vec<String> = (0..self.vocab_size).map(|i| ((b'a' + i as u8) as char).to_string()).collect();
        let variables = (0..self.variables)
            .map(|v| VariableSpec {
                name: format!("v{v:03}"),
                kind: if v < n_cont {
                    VariableKind::Continuous
                } else {
                    VariableKind::Categorical { vocab: vocab.clone() }
                },
            })
            .collect();
        VariableSchema { variables }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCohort {
    pub schema: VariableSchema,
    pub records: Vec<PatientRecord>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCohort, DataError> {
    spec.validate()?;
    let schema = spec.schema();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_cont = spec.variables - spec.categorical;

    let base: Vec<f64> = (0..n_cont).map(|_| rng.random_range(0.0..100.0)).collect();
    let scale: Vec<f64> = (0..n_cont).map(|_| rng.random_range(0.5..5.0)).collect();
    let n_inf = (spec.informative_fraction * n_cont as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n_cont).collect();
    order.shuffle(&mut rng);
    let mut shift = vec![0.0; n_cont];
    for &v in order.iter().take(n_inf) {
        shift[v] = if rng.random_bool(0.5) { spec.separation } else { -spec.separation };
    }

    let mut labels: Vec<u8> = std::iter::repeat_n(1u8, spec.n_pos).chain(std::iter::repeat_n(0u8, spec.n_neg)).collect();
    labels.shuffle(&mut rng);

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let hourly = Normal::new(0.0, 0.5).expect("hourly normal");
    let width = (labels.len() - 1).to_string().len().max(4);
    let mut records = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let mut rec = PatientRecord::empty(format!("p{i:0width$}"), spec.hours, spec.variables, label);
        let offset: Vec<f64> = (0..n_cont).map(|_| unit.sample(&mut rng)).collect();
        let mut category: Vec<usize> = (0..spec.categorical).map(|_| rng.random_range(0..spec.vocab_size)).collect();
        for t in 0..spec.hours {
            for v in 0..spec.variables {
                let value = if v < n_cont {
                    let mu = if label == 1 { shift[v] } else { 0.0 };
                    base[v] + scale[v] * (mu + offset[v] + hourly.sample(&mut rng))
                } else {
                    let c = &mut category[v - n_cont];
                    if rng.random_bool(0.1) {
                        *c = rng.random_range(0..spec.vocab_size);
                    }
                    *c as f64
                };
                if !rng.random_bool(spec.missing_rate) {
                    rec.set(t, v, value);
                }
            }
        }
        records.push(rec);
    }
    Ok(SyntheticCohort { schema, records })
}
