//! Central finite-difference check of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ModelParams, ParamId};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates left out because a kink (e.g. a ReLU switching) lies
    /// within `epsilon`: the one-sided differences disagree by more than
    /// [`KINK_TOLERANCE`] and the analytic gradient matches one of them
    /// better than the central difference, which is meaningless there.
    pub skipped_kinks: usize,
    /// `(parameter name, flat index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

fn eval<F>(f: &F, params: &ModelParams) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::with_params(params);
    let out = f(&mut tape)?;
    let v = tape.scalar(out) as f64;
    if !v.is_finite() {
        return Err(Error::Validation("objective is not finite".into()));
    }
    Ok(v)
}

/// Relative disagreement between forward and backward differences above
/// which a coordinate may be treated as sitting next to a kink.
pub const KINK_TOLERANCE: f64 = 1e-3;

/// Compares the analytic gradient of `f` with central differences on up to
/// `per_tensor` randomly chosen coordinates of every parameter tensor.
///
/// The error at a coordinate is `|analytic − numeric| / max(1, |numeric|)`.
/// Coordinates next to a kink are counted in `skipped_kinks` instead.
pub fn finite_diff_check<F>(
    f: F,
    params: &ModelParams,
    epsilon: f32,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    if !(1e-5..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!(
            "finite-difference epsilon {epsilon} outside [1e-5, 1e-3]"
        )));
    }
    let (f0, analytic) = {
        let mut tape = Tape::with_params(params);
        let out = f(&mut tape)?;
        let f0 = tape.scalar(out) as f64;
        if !f0.is_finite() {
            return Err(Error::Validation("objective is not finite".into()));
        }
        (f0, tape.backward(out)?.param_grads(params))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    for id in params.ids() {
        let n = params.get(id).len();
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for k in coords {
            let orig = params.get(id).data()[k];
            let plus = orig + epsilon;
            let minus = orig - epsilon;
            let fp = perturbed(&f, &mut work, id, k, plus)?;
            let fm = perturbed(&f, &mut work, id, k, minus)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (fp - fm) / (plus as f64 - minus as f64);
            let forward = (fp - f0) / (plus as f64 - orig as f64);
            let backward = (f0 - fm) / (orig as f64 - minus as f64);
            let a = analytic[id.0].data()[k] as f64;
            // Near a kink the analytic value equals one one-sided slope; on a
            // smooth curve it sits between them, closest to the central one.
            let asymmetric = (forward - backward).abs() / numeric.abs().max(1.0) > KINK_TOLERANCE;
            let one_sided = (a - forward).abs().min((a - backward).abs()) < (a - numeric).abs();
            if asymmetric && one_sided {
                report.skipped_kinks += 1;
                continue;
            }
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((params.name(id).to_string(), k, a, numeric));
            }
        }
    }
    Ok(report)
}

fn perturbed<F>(f: &F, work: &mut ModelParams, id: ParamId, k: usize, value: f32) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    work.get_mut(id).data_mut()[k] = value;
    eval(f, work)
}
