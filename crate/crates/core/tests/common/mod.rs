#![allow(dead_code)]

pub mod oracles;
pub mod suites;

use dtca::tensor::{Graph, Tensor, Var};

/// Central finite-difference gradient of `f` at `inputs`, compared against
/// the tape's analytic gradient. Returns the worst per-input relative error
/// `max|analytic - numeric| / max(max|analytic|, max|numeric|)`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss).expect("scalar loss");

    let eval = |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap().to_f64_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..analytic.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * step);
        }
        let scale = analytic
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let rel = if scale == 0.0 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}
