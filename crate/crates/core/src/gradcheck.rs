//! Central-difference gradient checking against the tape.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing tape and numeric gradients coordinate by coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        self.max_absolute_error = self.max_absolute_error.max(abs);
        self.max_relative_error = self.max_relative_error.max(abs / denom);
        self.coordinates += 1;
    }

    /// Folds another report in (used when checking several tensors).
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_absolute_error = self.max_absolute_error.max(other.max_absolute_error);
        self.max_relative_error = self.max_relative_error.max(other.max_relative_error);
        self.coordinates += other.coordinates;
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        GradCheckReport {
            max_relative_error: 0.0,
            max_absolute_error: 0.0,
            coordinates: 0,
        }
    }
}

/// Checks the tape gradient of a scalar-valued `f` at `x` against
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Argument(format!("step must be positive, got {h}")));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let v = tape.var(x.clone());
    let out = f(&mut tape, v)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut report = GradCheckReport::default();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        report.record(analytic.data()[i], numeric);
    }
    Ok(report)
}

/// Like [`grad_check`] but for a function of several named tensors at once,
/// e.g. a whole model's parameters. `f` receives one tape leaf per input.
/// Only the coordinates chosen by `select(input_index, len)` are perturbed.
pub fn grad_check_many<F, S>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    select: S,
) -> Result<Vec<GradCheckReport>>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
    S: Fn(usize, usize) -> Vec<usize>,
{
    let eval = |point: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.constant_ref(t)).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut point = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut report = GradCheckReport::default();
        for i in select(k, input.len()) {
            let orig = point[k].data()[i];
            point[k].data_mut()[i] = orig + h;
            let up = eval(&point)?;
            point[k].data_mut()[i] = orig - h;
            let down = eval(&point)?;
            point[k].data_mut()[i] = orig;
            report.record(analytic.data()[i], (up - down) / (2.0 * h));
        }
        reports.push(report);
    }
    Ok(reports)
}

fn scalar_of(tape: &Tape<'_>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Argument(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor {
        Tensor::from_rows(&[vec![0.3, -0.7, 0.1], vec![0.9, 0.2, -0.4]]).unwrap()
    }

    #[test]
    fn sum_is_exact() {
        let r = grad_check(|t, x| Ok(t.sum(x)), &sample(), 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-10, "{r:?}");
        assert_eq!(r.coordinates, 6);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let r = grad_check(
            |t, x| {
                let s = t.softmax_rows(x)?;
                Ok(t.sum(s))
            },
            &sample(),
            1e-5,
        )
        .unwrap();
        // Both sides are zero up to rounding; the relative figure is
        // meaningless at that scale, so compare absolutely.
        assert!(r.max_absolute_error < 1e-10, "{r:?}");
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(grad_check(|t, x| Ok(t.sum(x)), &sample(), 0.0).is_err());
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // relu at exactly 0 has a one-sided numeric slope of 0.5; the tape
        // uses the 0 subgradient, which the check must flag.
        let x = Tensor::row(vec![0.0]);
        let r = grad_check(
            |t, x| {
                let y = t.relu(x);
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error > 0.1);
    }
}
