//! Central finite-difference checks of tape gradients.

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Default perturbation for float64 central differences.
pub const FD_STEP: f64 = 1e-5;

/// Floor of the relative-error denominator, so that entries whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub entries: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_rel_err = self.max_rel_err.max(rel_err(analytic, numeric));
        self.max_abs_err = self.max_abs_err.max((analytic - numeric).abs());
        self.entries += 1;
    }

    fn merge(&mut self, other: GradCheck) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.entries += other.entries;
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Entry positions to probe in a tensor of `len` elements: all of them, or
/// `cap` evenly spread ones.
fn probe_positions(len: usize, cap: usize) -> Vec<usize> {
    if len <= cap {
        (0..len).collect()
    } else {
        (0..cap).map(|i| i * len / cap).collect()
    }
}

/// Compares the tape gradient of `f` with respect to each of `inputs` against
/// central differences. `f` must build a scalar on the tape it is given.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, max_per_input: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in probe_positions(inputs[k].len(), max_per_input) {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x0;
            report.record(analytic.data()[i], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Compares parameter gradients of `f` against central differences taken by
/// perturbing the parameter values in a scratch copy of `store`.
pub fn check_params<F>(store: &ParamStore, h: f64, max_per_param: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, s)?;
        Ok(tape.value(loss).item())
    };
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let mut report = GradCheck::default();
    let mut work = store.clone();
    for k in 0..store.len() {
        let p = store.get(ParamId(k));
        let analytic = grads
            .param(p.key())
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.value().shape()));
        let mut sub = GradCheck::default();
        for i in probe_positions(p.numel(), max_per_param) {
            let x0 = p.value().data()[i];
            work.get_mut(ParamId(k)).value_mut().data_mut()[i] = x0 + h;
            let up = eval(&work)?;
            work.get_mut(ParamId(k)).value_mut().data_mut()[i] = x0 - h;
            let down = eval(&work)?;
            work.get_mut(ParamId(k)).value_mut().data_mut()[i] = x0;
            sub.record(analytic.data()[i], (up - down) / (2.0 * h));
        }
        report.merge(sub);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let r = check_inputs(&[x], FD_STEP, usize::MAX, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert_eq!(r.entries, 3);
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn probes_are_capped() {
        assert_eq!(probe_positions(10, 4), vec![0, 2, 5, 7]);
        assert_eq!(probe_positions(3, 4), vec![0, 1, 2]);
    }
}
