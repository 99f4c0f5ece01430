//! Finite-difference verification of tape gradients.

use super::tape::{NumericsError, Tape, Var};
use super::tensor::Tensor;

/// Per-parameter outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Relative error between an analytic and a numeric gradient entry.
/// The denominator is floored at 1 so near-zero gradients are compared
/// absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1.0)
}

/// Central finite-difference gradients of `build_loss` w.r.t. each parameter
/// tensor. `build_loss` must be a pure function of the parameter values.
pub fn numeric_gradients<F>(
    params: &[(String, Tensor<f64>)],
    mut build_loss: F,
    eps: f64,
) -> Result<Vec<Tensor<f64>>, NumericsError>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    let mut eval = |values: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build_loss(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(values[p].shape().to_vec());
        for j in 0..values[p].len() {
            let orig = values[p].data()[j];
            values[p].data_mut()[j] = orig + eps;
            let plus = eval(&values)?;
            values[p].data_mut()[j] = orig - eps;
            let minus = eval(&values)?;
            values[p].data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compare tape gradients of a scalar function against central finite
/// differences. `build_loss` is invoked many times and must be
/// deterministic: any randomness has to be fixed (sampled once) before the
/// closure is built. Two initial forward passes are compared to detect
/// violations.
pub fn check_gradients<F>(
    params: &[(String, Tensor<f64>)],
    mut build_loss: F,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = build_loss(&mut tape, &vars)?;
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(NumericsError::NonFinite("gradient-check loss"));
    }
    tape.backward(loss);

    // determinism probe: an independent rebuild must give the same value
    {
        let mut tape2 = Tape::new();
        let vars2: Vec<Var> = params
            .iter()
            .map(|(_, t)| tape2.param(t.clone()))
            .collect();
        let loss2 = build_loss(&mut tape2, &vars2)?;
        let second = tape2.value(loss2).item();
        if second != loss_value {
            return Err(NumericsError::NonDeterministic {
                first: loss_value,
                second,
            });
        }
    }

    let numeric = numeric_gradients(params, &mut build_loss, eps)?;

    let mut per_param = Vec::with_capacity(params.len());
    let mut worst = 0.0f64;
    for (p, (name, tensor)) in params.iter().enumerate() {
        let zero = Tensor::zeros(tensor.shape().to_vec());
        let analytic = tape.grad(vars[p]).unwrap_or(&zero);
        let mut m = 0.0f64;
        for (&a, &n) in analytic.data().iter().zip(numeric[p].data()) {
            m = m.max(rel_err(a, n));
        }
        worst = worst.max(m);
        per_param.push(ParamCheck {
            name: name.clone(),
            max_rel_err: m,
        });
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: worst,
        tol,
    })
}
