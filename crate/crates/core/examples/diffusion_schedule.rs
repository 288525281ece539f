//! The forward noising process: the linear schedule, the closed-form
//! marginal at a few timesteps and a respaced sampling chain.
//!
//! ```text
//! cargo run --example diffusion_schedule
//! ```

use dtca::diffusion::{q_sample, NoiseSchedule};
use dtca::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dtca::Result<()> {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    println!("T = {}, alpha_bar(T) = {:.3e}", sched.steps(), sched.alpha_bar(sched.steps()));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x0 = Tensor::<f64>::full(&[4096], 1.0);
    println!("   t   beta      alpha_bar   mean(x_t)  std(x_t)");
    for t in [1, 10, 100, 250, 500, 750, 1000] {
        let eps = Tensor::randn(&[4096], 1.0, &mut rng);
        let xt = q_sample(&x0, t, &eps, &sched)?;
        let n = xt.data().len() as f64;
        let mean = xt.data().iter().sum::<f64>() / n;
        let std = (xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        println!("{t:4}   {:.5}   {:.6}    {mean:+.4}     {std:.4}", sched.beta(t), sched.alpha_bar(t));
    }

    let (chain, kept) = sched.respaced(10)?;
    println!("respaced to {} steps, model timesteps {kept:?}", chain.steps());
    for k in 1..=chain.steps() {
        assert!((chain.alpha_bar(k) - sched.alpha_bar(kept[k - 1])).abs() < 1e-12);
    }
    println!("every respaced step keeps the original cumulative alpha_bar");
    Ok(())
}
