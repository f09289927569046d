use super::{ParameterSet, Tape, Var};

fn eval(params: &ParameterSet, build: &impl Fn(&mut Tape, &ParameterSet) -> Var) -> f64 {
    let mut tape = Tape::new();
    let out = build(&mut tape, params);
    tape.scalar(out)
}

/// Largest relative error between tape gradients and central differences.
/// `build` must bind `params` with [`Tape::bind_all`] or [`Tape::param`].
pub(crate) fn max_gradient_error(params: &ParameterSet, build: impl Fn(&mut Tape, &ParameterSet) -> Var) -> f64 {
    max_gradient_error_with_step(params, 1e-6, build)
}

pub(crate) fn max_gradient_error_with_step(
    params: &ParameterSet,
    h: f64,
    build: impl Fn(&mut Tape, &ParameterSet) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let out = build(&mut tape, params);
    let grads = tape.backward(out);
    let analytic = tape.param_gradients(&grads, params);
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        for k in 0..params.tensor(i).len() {
            let mut plus = params.clone();
            plus.param_mut(i).value.data_mut()[k] += h;
            let mut minus = params.clone();
            minus.param_mut(i).value.data_mut()[k] -= h;
            let numeric = (eval(&plus, &build) - eval(&minus, &build)) / (2.0 * h);
            let a = analytic.tensors[i][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    worst
}
