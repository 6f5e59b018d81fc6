//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::numkit::{Tape, Tensor, Var};

/// Outcome of comparing analytic and numeric gradients for one input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `‖a − n‖ / max(‖a‖, ‖n‖)`, with a tiny floor so two zero vectors compare equal.
    pub fn relative_error(&self) -> f64 {
        let diff: f64 = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = self.numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        diff / na.max(nn).max(1e-12)
    }
}

/// Checks the gradient of `f` with respect to every tensor in `inputs`.
///
/// `f` receives fresh tape handles for the inputs (all gradient-carrying)
/// and must return a scalar loss. Numeric gradients use step `h`.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut out = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            *slot = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        }
        out.push(GradCheck { analytic, numeric });
    }
    Ok(out)
}
