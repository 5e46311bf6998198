//! Central finite-difference gradient checks at `f64`.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// Largest absolute difference.
    pub max_abs_err: f64,
    pub n_checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `h`, for every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, floor: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vs);
        (g, vs, out)
    };
    let (g, vs, out) = eval(inputs);
    let grads = g.backward(out);
    let analytic: Vec<Tensor<f64>> = vs
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut res = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, n_checked: 0 };
    let mut xs = inputs.to_vec();
    for k in 0..xs.len() {
        for i in 0..xs[k].numel() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + h;
            let (g, _, o) = eval(&xs);
            let fp = g.value(o).item();
            xs[k].data_mut()[i] = orig - h;
            let (g, _, o) = eval(&xs);
            let fm = g.value(o).item();
            xs[k].data_mut()[i] = orig;
            let num = (fp - fm) / (2.0 * h);
            let ana = analytic[k].data()[i];
            let abs = (ana - num).abs();
            let rel = abs / ana.abs().max(num.abs()).max(floor);
            res.max_abs_err = res.max_abs_err.max(abs);
            res.max_rel_err = res.max_rel_err.max(rel);
            res.n_checked += 1;
        }
    }
    res
}
