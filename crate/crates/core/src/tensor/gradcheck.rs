//! Central finite-difference check of tape gradients.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Entries compared against a relative tolerance.
    pub checked: usize,
    pub max_relative_error: f64,
    /// Entries whose analytic gradient is zero, compared absolutely.
    pub zero_checked: usize,
    pub max_zero_error: f64,
    /// Worst entry as `(parameter, flat index, analytic, numeric)`.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64, zero_tol: f64) -> bool {
        self.checked > 0 && self.max_relative_error < rel_tol && self.max_zero_error < zero_tol
    }
}

/// Relative error with a floor on the denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares analytic gradients of `loss` against central differences at
/// `points` randomly chosen parameter entries with non-negligible gradient,
/// plus up to `points` entries whose analytic gradient is exactly zero.
pub fn gradcheck<F>(store: &ParamStore, points: usize, step: f64, seed: u64, loss: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(&mut tape, s)?;
        Ok(tape.value(l).item())
    };
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    let grads = tape.backward(l)?.params();
    let mut live = Vec::new();
    let mut dead = Vec::new();
    for (name, g) in &grads {
        for (i, &v) in g.data().iter().enumerate() {
            if v.abs() > 1e-6 {
                live.push((name.clone(), i, v));
            } else if v == 0.0 {
                dead.push((name.clone(), i, v));
            }
        }
    }
    if live.is_empty() {
        return Err(Error::InvalidData("gradient is zero everywhere".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numeric = |name: &str, i: usize| -> Result<f64> {
        let mut s = store.clone();
        let theta = s.get(name).expect("bound parameter").data()[i];
        let h = step * theta.abs().max(1.0);
        s.get_mut(name).unwrap().data_mut()[i] = theta + h;
        let up = eval(&s)?;
        s.get_mut(name).unwrap().data_mut()[i] = theta - h;
        let down = eval(&s)?;
        Ok((up - down) / (2.0 * h))
    };
    let mut report = GradCheck {
        checked: 0,
        max_relative_error: 0.0,
        zero_checked: 0,
        max_zero_error: 0.0,
        worst: None,
    };
    for _ in 0..points {
        let (name, i, a) = live.choose(&mut rng).unwrap().clone();
        let n = numeric(&name, i)?;
        let e = relative_error(a, n);
        report.checked += 1;
        if e >= report.max_relative_error {
            report.max_relative_error = e;
            report.worst = Some((name, i, a, n));
        }
    }
    for _ in 0..points.min(dead.len()) {
        let (name, i, _) = &dead[rng.random_range(0..dead.len())];
        let n = numeric(name, *i)?;
        report.zero_checked += 1;
        report.max_zero_error = report.max_zero_error.max(n.abs());
    }
    Ok(report)
}
