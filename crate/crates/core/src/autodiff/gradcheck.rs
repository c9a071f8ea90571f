use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-6;

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: usize,
    pub max_abs_err: f64,
    /// Relative error over entries whose absolute error exceeds the floor.
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

/// Compares the tape's gradients of a scalar function against central finite
/// differences (step `1e-5`) for every entry of every input.
///
/// `f` is re-run from scratch for each perturbation, so it must be deterministic.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].rows(), inputs[k].cols()));
        for e in 0..inputs[k].data().len() {
            let orig = inputs[k].data()[e];
            work[k].data_mut()[e] = orig + STEP;
            let up = eval(&work)?;
            work[k].data_mut()[e] = orig - STEP;
            let down = eval(&work)?;
            work[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            if !numeric.is_finite() {
                return Err(Error::Metric(format!(
                    "non-finite finite difference for input {k} entry {e}"
                )));
            }
            let a = analytic.data()[e];
            let abs = (a - numeric).abs();
            report.entries += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs > ABS_FLOOR {
                let rel = abs / a.abs().max(numeric.abs());
                report.max_rel_err = report.max_rel_err.max(rel);
            }
        }
    }
    Ok(report)
}
