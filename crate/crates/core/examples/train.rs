//! Trains the desk-scale model on freshly generated synthetic storms and
//! prints the loss curve.
//!
//! ```text
//! cargo run --release --example train -- [steps] [variant]
//! ```

use dtca::cli::RunConfig;
use dtca::data::gen_synthetic;
use dtca::pipeline::{median, Trainer};
use std::time::Instant;

fn main() -> dtca::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(200, |s| s.parse().expect("steps"));
    let mut cfg = RunConfig::default();
    if let Some(v) = args.next() {
        cfg.set("variant", &v)?;
    }
    cfg.train.steps = steps;

    let seqs = (0..64)
        .map(|i| gen_synthetic(&cfg.blobs, cfg.data.seq_frames, cfg.model.height, cfg.model.width, 1000 + i))
        .collect::<dtca::Result<Vec<_>>>()?;

    let mut trainer = Trainer::new(&cfg)?;
    println!(
        "variant {} with {} parameters, {} steps of batch {}",
        cfg.model.variant,
        trainer.model.params().count(),
        steps,
        cfg.train.batch
    );
    let start = Instant::now();
    let losses = trainer.train(&seqs, |t, loss| {
        if t.step() % 25 == 0 {
            println!("step {:5}  loss {loss:.4}  {:.1}s", t.step(), start.elapsed().as_secs_f64());
        }
        Ok(())
    })?;
    let vals: Vec<f64> = losses.iter().map(|l| l.1).collect();
    let w = (vals.len() / 10).max(1);
    println!(
        "median loss: first {w} steps {:.4}, last {w} steps {:.4}",
        median(&vals[..w]),
        median(&vals[vals.len() - w..])
    );
    Ok(())
}
