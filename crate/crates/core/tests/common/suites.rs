//! Gradient checks shared by the unit suites and the acceptance run.

use super::grad_check;
use dtca::model::{Model, ModelConfig};
use dtca::tensor::{Graph, RearrangePlan, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Weighted sum so that every output element gets a distinct upstream grad.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let w = Tensor::uniform(g.shape(y), -1.0, 1.0, &mut rng(seed));
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

fn record(
    out: &mut Vec<(String, f64)>,
    name: &str,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) {
    out.push((name.to_string(), grad_check(inputs, STEP, f)));
}

/// Worst relative error per named op check.
pub fn op_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    // batched and broadcast matmul
    {
        let a = Tensor::<f64>::uniform(&[2, 3, 4], -3.0, 3.0, &mut rng(4));
        let b = Tensor::<f64>::uniform(&[2, 4, 5], -3.0, 3.0, &mut rng(5));
        let w = Tensor::<f64>::uniform(&[4, 5], -3.0, 3.0, &mut rng(6));
        record(&mut out, "batched", &[a.clone(), b], |g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            weighted_sum(g, c, 7)
        });
        record(
            &mut out,
            "broadcast rhs",
            &[a.clone(), w.clone()],
            |g, v| {
                let c = g.matmul(v[0], v[1]).unwrap();
                weighted_sum(g, c, 8)
            },
        );
        let m = Tensor::<f64>::uniform(&[5, 3], -3.0, 3.0, &mut rng(9));
        record(&mut out, "broadcast lhs", &[m, a], |g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            weighted_sum(g, c, 10)
        });
    }
    // elementwise ops
    {
        let a = Tensor::<f64>::uniform(&[2, 3, 4], -3.0, 3.0, &mut rng(11));
        let b = Tensor::<f64>::uniform(&[2, 3, 4], -3.0, 3.0, &mut rng(12));
        let s = Tensor::<f64>::uniform(&[4], -3.0, 3.0, &mut rng(13));
        record(&mut out, "add/sub/mul", &[a.clone(), b.clone()], |g, v| {
            let x = g.add(v[0], v[1]).unwrap();
            let y = g.sub(x, v[1]).unwrap();
            let z = g.mul(y, v[1]).unwrap();
            let z = g.scale(z, 0.7);
            let z = g.add_scalar(z, 1.5);
            weighted_sum(g, z, 14)
        });
        record(&mut out, "broadcast add/mul", &[a.clone(), s], |g, v| {
            let x = g.add_broadcast(v[0], v[1]).unwrap();
            let y = g.mul_broadcast(x, v[1]).unwrap();
            weighted_sum(g, y, 15)
        });
        record(&mut out, "gelu", &[a.clone()], |g, v| {
            let y = g.gelu(v[0]);
            weighted_sum(g, y, 16)
        });
        record(&mut out, "silu", &[a.clone()], |g, v| {
            let y = g.silu(v[0]);
            weighted_sum(g, y, 17)
        });
        let mask = Tensor::<f64>::uniform(&[2, 3, 4], 0.0, 1.0, &mut rng(18));
        record(&mut out, "mul_const/mean", &[a], move |g, v| {
            let y = g.mul_const(v[0], mask.clone()).unwrap();
            let y = g.mul(y, y).unwrap();
            g.mean(y)
        });
    }
    // softmax and layer norm
    {
        let x = Tensor::<f64>::uniform(&[3, 4, 5], -3.0, 3.0, &mut rng(20));
        for axis in 0..3 {
            record(&mut out, "softmax", &[x.clone()], |g, v| {
                let y = g.softmax(v[0], axis).unwrap();
                weighted_sum(g, y, 21)
            });
            let dim = x.shape()[axis];
            let gain = Tensor::<f64>::uniform(&[dim], 0.5, 1.5, &mut rng(22));
            let bias = Tensor::<f64>::uniform(&[dim], -1.0, 1.0, &mut rng(23));
            record(&mut out, "layer_norm", &[x.clone(), gain, bias], |g, v| {
                let y = g
                    .layer_norm(v[0], axis, Some(v[1]), Some(v[2]), 1e-5)
                    .unwrap();
                weighted_sum(g, y, 24)
            });
        }
    }
    // shape ops
    {
        let x = Tensor::<f64>::uniform(&[2, 6, 3, 4], -3.0, 3.0, &mut rng(30));
        let plan =
            RearrangePlan::new("b (s c) t n -> (b s) t c n", x.shape(), &[("s", 2)]).unwrap();
        record(&mut out, "rearrange", &[x.clone()], move |g, v| {
            let y = g.rearrange(v[0], &plan).unwrap();
            weighted_sum(g, y, 31)
        });
        let y = Tensor::<f64>::uniform(&[2, 2, 3, 4], -3.0, 3.0, &mut rng(32));
        record(&mut out, "concat/narrow", &[x.clone(), y], |g, v| {
            let c = g.concat(&[v[0], v[1]], 1).unwrap();
            let n = g.narrow(c, 1, 3, 4).unwrap();
            weighted_sum(g, n, 33)
        });
        record(&mut out, "expand", &[x], |g, v| {
            let e = g.expand(v[0], 2, 3).unwrap();
            weighted_sum(g, e, 34)
        });
    }
    // three layer composite graph
    {
        // matmul -> gelu -> layer_norm, three times, with shared upstream weights
        for seed in 0..5u64 {
            let x = Tensor::<f64>::uniform(&[4, 6], -3.0, 3.0, &mut rng(100 + seed));
            let ws: Vec<Tensor<f64>> = (0..3)
                .map(|i| Tensor::uniform(&[6, 6], -1.0, 1.0, &mut rng(200 + seed * 10 + i)))
                .collect();
            let mut inputs = vec![x];
            inputs.extend(ws);
            record(&mut out, "composite", &inputs, |g, v| {
                let mut h = v[0];
                for w in &v[1..] {
                    h = g.matmul(h, *w).unwrap();
                    h = g.gelu(h);
                    h = g.layer_norm(h, 1, None, None, 1e-5).unwrap();
                }
                weighted_sum(g, h, 300 + seed)
            });
        }
    }
    // attention pattern grad
    {
        let q = Tensor::<f64>::uniform(&[2, 5, 4], -3.0, 3.0, &mut rng(40));
        let k = Tensor::<f64>::uniform(&[2, 3, 4], -3.0, 3.0, &mut rng(41));
        let val = Tensor::<f64>::uniform(&[2, 3, 4], -3.0, 3.0, &mut rng(42));
        record(&mut out, "attention", &[q, k, val], |g, v| {
            let kt = g.permute(v[1], &[0, 2, 1]).unwrap();
            let s = g.matmul(v[0], kt).unwrap();
            let s = g.scale(s, 0.5);
            let p = g.softmax(s, 2).unwrap();
            let o = g.matmul(p, v[2]).unwrap();
            weighted_sum(g, o, 43)
        });
    }
    out
}

/// Worst relative error over every parameter of a depth-1 model.
pub fn depth_one_model_error() -> f64 {
    let cfg = ModelConfig {
        height: 4,
        width: 4,
        patch: 2,
        embed_dim: 8,
        heads: 2,
        depth: 1,
        mlp_ratio: 2,
        shift: 2,
        cond_frames: 1,
        pred_frames: 2,
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::new(cfg, &mut rng(29)).unwrap();
    // fully random parameters keep attention away from the uniform regime,
    // where query gradients vanish and finite differences are all roundoff
    let mut r = rng(30);
    for t in model.params_mut().tensors_mut() {
        *t = Tensor::uniform(t.shape(), -0.5, 0.5, &mut r);
    }
    let mut r = rng(31);
    let c = Tensor::<f64>::uniform(&[2, 1, 4, 4], -1.0, 1.0, &mut r);
    let x = Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, &mut r);
    let w = Tensor::<f64>::uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut rng(32));
    let params = model.params().tensors().to_vec();
    grad_check(&params, STEP, |g: &mut Graph<f64>, p: &[Var]| {
        let cv = g.constant(c.clone());
        let xv = g.constant(x.clone());
        let out = model.forward_bound(g, p, cv, xv, &[3, 700]).unwrap();
        let wv = g.constant(w.clone());
        let y = g.mul(out, wv).unwrap();
        g.sum(y)
    })
}
