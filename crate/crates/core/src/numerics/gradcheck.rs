//! Finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{Tape, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Lower bound on the relative-error denominator. Gradient entries smaller
/// than this are compared on an absolute scale instead.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of comparing reverse-mode gradients to central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// Largest relative error per input tensor.
    pub per_input: Vec<f64>,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Which coordinates of each input get a finite-difference probe.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    /// Up to `per_input` coordinates per input, chosen without replacement.
    Sample { per_input: usize, seed: u64 },
}

/// Max relative error between the reverse-mode gradient of `f` at `x` and
/// central finite differences.
pub fn check_gradient<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = check_gradients(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), Coordinates::All)?;
    Ok(report.max_rel_error)
}

/// Multi-input variant of [`check_gradient`].
pub fn check_gradients<F>(f: F, inputs: &[Tensor], coords: Coordinates) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v, t.rows(), t.cols()))
        .collect();
    drop(tape);

    let mut rng = match coords {
        Coordinates::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coordinates::All => None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_input: vec![0.0; inputs.len()],
        worst: None,
        checked: 0,
    };
    for (which, input) in inputs.iter().enumerate() {
        let indices: Vec<usize> = match (&coords, rng.as_mut()) {
            (Coordinates::Sample { per_input, .. }, Some(rng)) => {
                let amount = (*per_input).min(input.len());
                let mut picked = sample(rng, input.len(), amount).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..input.len()).collect(),
        };
        for idx in indices {
            let orig = input.data()[idx];
            work[which].data_mut()[idx] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[which].data_mut()[idx] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[which].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic[which].data()[idx], numeric);
            report.checked += 1;
            if err > report.per_input[which] {
                report.per_input[which] = err;
            }
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((which, idx));
            }
        }
    }
    Ok(report)
}
