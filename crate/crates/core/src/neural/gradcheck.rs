//! Central finite-difference oracle for tape gradients (float64).

use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest per-tensor relative error `|a - n| / max(|a|, |n|)` (L2 norms).
    pub max_rel_err: f64,
    pub per_param: Vec<f64>,
    pub entries_checked: usize,
}

/// Compares the analytic gradient of `loss_fn` against central differences
/// with step `h` for every entry of every tensor in `params`.
///
/// `loss_fn` receives a fresh tape with `params` registered (in order) as
/// trainable leaves and must return a scalar node.
pub fn check_gradients<F>(params: &[Tensor<f64>], h: f64, loss_fn: F) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |ps: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param_owned(p.clone())).collect();
        let loss = loss_fn(&mut tape, &vars);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param_owned(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars);
    let mut grads = tape.backward(loss);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take_or_zeros(v, p.shape()))
        .collect();

    let mut work = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut entries = 0;
    for (pi, a) in analytic.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut num2 = 0.0;
        for j in 0..a.len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let up = eval(&work);
            work[pi].data_mut()[j] = orig - h;
            let down = eval(&work);
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let an = a.data()[j];
            diff2 += (an - numeric).powi(2);
            an2 += an * an;
            num2 += numeric * numeric;
            entries += 1;
        }
        let denom = an2.sqrt().max(num2.sqrt());
        per_param.push(if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom });
    }
    GradCheckReport {
        max_rel_err: per_param.iter().copied().fold(0.0, f64::max),
        per_param,
        entries_checked: entries,
    }
}
