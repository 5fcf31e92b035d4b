//! Central finite-difference gradient checking.
//!
//! The checker rebuilds the computation from scratch for every probe, so it
//! shares no state with the backward pass it verifies. Relative error uses
//! a small absolute floor so zero-gradient coordinates compare cleanly.

use super::{ArrayId, DiffError, Tape};
use crate::scalar::Scalar;

/// Tolerances for one precision.
#[derive(Debug, Clone, Copy)]
pub struct CheckSettings {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl CheckSettings {
    /// Double-precision defaults: step 1e-4, tolerance 1e-5.
    pub fn double() -> Self {
        CheckSettings {
            step: 1e-4,
            tol: 1e-5,
            floor: 1e-6,
        }
    }

    /// Single-precision defaults: wider step, tolerance 1e-3.
    pub fn single() -> Self {
        CheckSettings {
            step: 5e-3,
            tol: 1e-3,
            floor: 5e-2,
        }
    }
}

/// Worst coordinate found by a check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub input_index: usize,
    pub element_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl CheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare analytic gradients of a scalar-valued graph against central
/// finite differences over every element of every input.
///
/// `build` receives a fresh tape plus the bound inputs (all registered as
/// requires-grad) and must return the scalar root.
pub fn check_gradients<T, F>(
    inputs: &[(Vec<T>, Vec<usize>)],
    settings: CheckSettings,
    mut build: F,
) -> Result<CheckReport, DiffError>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &[ArrayId]) -> Result<ArrayId, DiffError>,
{
    let eval = |data: &[(Vec<T>, Vec<usize>)],
                build: &mut F|
     -> Result<(f64, Vec<Vec<T>>), DiffError> {
        let mut tape = Tape::new();
        let ids: Vec<ArrayId> = data
            .iter()
            .map(|(v, s)| tape.param(v, s))
            .collect::<Result<_, _>>()?;
        let root = build(&mut tape, &ids)?;
        let loss = tape.values(root)[0].acc();
        tape.backward(root)?;
        let grads = ids.iter().map(|&id| tape.grad_or_zeros(id)).collect();
        Ok((loss, grads))
    };

    let (_, analytic) = eval(inputs, &mut build)?;

    let mut report = CheckReport {
        max_rel_err: 0.0,
        input_index: 0,
        element_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };

    let mut probe = inputs.to_vec();
    for (pi, (values, _)) in inputs.iter().enumerate() {
        for ei in 0..values.len() {
            let x0 = values[ei];
            let xp = T::from_acc(x0.acc() + settings.step);
            let xm = T::from_acc(x0.acc() - settings.step);
            // Effective step after storage rounding.
            let h = (xp.acc() - xm.acc()) / 2.0;

            probe[pi].0[ei] = xp;
            let mut tape = Tape::new();
            let ids: Vec<ArrayId> = probe
                .iter()
                .map(|(v, s)| tape.input(v.clone(), s))
                .collect::<Result<_, _>>()?;
            let root = build(&mut tape, &ids)?;
            let fp = tape.values(root)[0].acc();

            probe[pi].0[ei] = xm;
            let mut tape = Tape::new();
            let ids: Vec<ArrayId> = probe
                .iter()
                .map(|(v, s)| tape.input(v.clone(), s))
                .collect::<Result<_, _>>()?;
            let root = build(&mut tape, &ids)?;
            let fm = tape.values(root)[0].acc();

            probe[pi].0[ei] = x0;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi][ei].acc();
            let denom = a.abs().max(numeric.abs()).max(settings.floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.input_index = pi;
                report.element_index = ei;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Deterministic pseudo-random values in (-1, 1) for test fixtures.
pub fn uniform_values<T: Scalar>(rng: &mut impl rand::Rng, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| T::from_acc(rng.gen_range(-1.0..1.0)))
        .collect()
}
