//! Central finite-difference validation of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{OpKind, Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub threshold: f64,
    /// Denominator floor of the relative error, so that gradients at the
    /// floating-point noise level do not register as failures.
    pub abs_floor: f64,
    /// Check at most this many coordinates per parameter, sampled with `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Test fixture: corrupt the backward rule of this op kind.
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            threshold: 1e-4,
            abs_floor: 1e-6,
            max_coords: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates where the two difference quotients (step h and h/2)
    /// disagree, i.e. the perturbation straddles a kink.
    pub skipped_nonsmooth: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn eval<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points
        .iter()
        .map(|p| tape.constant(p.clone()))
        .collect::<Result<_>>()?;
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the tape gradient of scalar `f` at `points` against
/// `(f(x+h) − f(x−h)) / 2h`, coordinate by coordinate.
pub fn grad_check<F>(f: F, points: &[(String, Tensor)], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(TensorError::InvalidAttr {
            op: "grad_check",
            detail: format!("step must be positive, got {}", opts.step),
        });
    }
    let mut tape = match opts.fault {
        Some(kind) => Tape::with_fault(kind),
        None => Tape::new(),
    };
    let vars: Vec<Var> = points
        .iter()
        .map(|(_, p)| tape.param(p.clone()))
        .collect::<Result<_>>()?;
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(&v, (_, p))| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(tape);

    let mut work: Vec<Tensor> = points.iter().map(|(_, p)| p.clone()).collect();
    let h = opts.step;
    let mut params = Vec::with_capacity(points.len());
    for (pi, (name, point)) in points.iter().enumerate() {
        let n = point.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ ((pi as u64 + 1) << 32));
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            checked: 0,
            skipped_nonsmooth: 0,
        };
        for &c in &coords {
            let x0 = point.data()[c];
            let quotient = |work: &mut Vec<Tensor>, step: f64| -> Result<f64> {
                work[pi].data_mut()[c] = x0 + step;
                let up = eval(&f, work)?;
                work[pi].data_mut()[c] = x0 - step;
                let down = eval(&f, work)?;
                work[pi].data_mut()[c] = x0;
                Ok((up - down) / (2.0 * step))
            };
            let numeric = quotient(&mut work, h)?;
            let a = analytic[pi].data()[c];
            let mut err = rel_err(a, numeric, opts.abs_floor);
            if err > opts.threshold {
                let refined = quotient(&mut work, h / 2.0)?;
                if rel_err(numeric, refined, opts.abs_floor) > opts.threshold {
                    check.skipped_nonsmooth += 1;
                    continue;
                }
                err = err.min(rel_err(a, refined, opts.abs_floor));
            }
            check.checked += 1;
            if err > check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = c;
            }
        }
        params.push(check);
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        pass: max_rel_err <= opts.threshold,
        max_rel_err,
        threshold: opts.threshold,
        params,
    })
}
