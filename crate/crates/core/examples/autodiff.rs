//! Reverse-mode autodiff on the tape: a two-layer network, its analytic
//! gradient and a central finite-difference check of one weight.
//!
//! ```text
//! cargo run --example autodiff
//! ```

use dtca::tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss(g: &mut Graph<f64>, x: Var, w1: Var, w2: Var) -> dtca::Result<Var> {
    let h = g.matmul(x, w1)?;
    let h = g.gelu(h);
    let h = g.layer_norm(h, 1, None, None, 1e-5)?;
    let y = g.matmul(h, w2)?;
    let sq = g.mul(y, y)?;
    Ok(g.mean(sq))
}

fn main() -> dtca::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::randn(&[8, 6], 1.0, &mut rng);
    let w1 = Tensor::<f64>::uniform(&[6, 16], -0.5, 0.5, &mut rng);
    let w2 = Tensor::<f64>::uniform(&[16, 3], -0.5, 0.5, &mut rng);

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w1v = g.leaf(w1.clone(), true);
    let w2v = g.leaf(w2.clone(), true);
    let l = loss(&mut g, xv, w1v, w2v)?;
    println!("loss {:.6} over a tape of {} nodes", g.value(l).item(), g.len());
    let grads = g.backward(l)?;
    let d_w1 = grads.get(w1v).expect("w1 gradient");
    println!("|dL/dW1|max = {:.6}", d_w1.max_abs());

    let eval = |w: &Tensor<f64>| -> dtca::Result<f64> {
        let mut g = Graph::new();
        let (xv, wv, w2v) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(w2.clone()));
        let l = loss(&mut g, xv, wv, w2v)?;
        Ok(g.value(l).item())
    };
    let (i, h) = (5, 1e-5);
    let (mut plus, mut minus) = (w1.clone(), w1.clone());
    plus.data_mut()[i] += h;
    minus.data_mut()[i] -= h;
    let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
    println!("dL/dW1[{i}]: analytic {:.9}, finite difference {numeric:.9}", d_w1.data()[i]);
    Ok(())
}
