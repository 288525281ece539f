//! End-to-end nowcast: train on synthetic storms, draw ensemble forecasts
//! for held-out sequences and score them against persistence.
//!
//! ```text
//! cargo run --release --example nowcast -- [train_steps] [seed] [key=value ...]
//! ```

use dtca::cli::RunConfig;
use dtca::data::gen_synthetic;
use dtca::pipeline::{evaluate, median, Trainer};
use std::time::Instant;

fn main() -> dtca::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = RunConfig::default();
    cfg.train.steps = args.first().map_or(2000, |s| s.parse().expect("train_steps"));
    cfg.train.seed = args.get(1).map_or(0, |s| s.parse().expect("seed"));
    cfg.sample.steps = 50;
    cfg.sample.seed = cfg.train.seed;
    cfg.eval.thresholds = vec![1.0];
    for kv in args.iter().skip(2) {
        let (k, v) = kv.split_once('=').expect("key=value");
        cfg.set(k, v)?;
    }
    cfg.validate()?;

    let (h, w, f) = (cfg.model.height, cfg.model.width, cfg.model.frames());
    // training and evaluation draw from disjoint seed ranges
    let train = (0..256)
        .map(|i| gen_synthetic(&cfg.blobs, cfg.data.seq_frames, h, w, cfg.train.seed * 10_000 + i))
        .collect::<dtca::Result<Vec<_>>>()?;
    let held_out = (0..16)
        .map(|i| gen_synthetic(&cfg.blobs, f, h, w, 1_000_000 + cfg.train.seed * 10_000 + i))
        .collect::<dtca::Result<Vec<_>>>()?;

    let start = Instant::now();
    let mut trainer = Trainer::new(&cfg)?;
    let losses = trainer.train(&train, |t, loss| {
        if t.step() % 100 == 0 {
            println!("step {:5}  loss {loss:.4}  {:.0}s", t.step(), start.elapsed().as_secs_f64());
        }
        Ok(())
    })?;
    let vals: Vec<f64> = losses.iter().map(|l| l.1).collect();
    let w100 = vals.len().min(100);
    println!(
        "loss median first {w100}: {:.4}, last {w100}: {:.4}",
        median(&vals[..w100]),
        median(&vals[vals.len() - w100..])
    );

    let ev = evaluate(&trainer.model, &held_out, &cfg)?;
    println!("lead  CSI(model)  CSI(persistence)  CRPS(model)  CRPS(persistence)");
    for l in 0..ev.model.leads() {
        println!(
            "{:4}  {:10.4}  {:16.4}  {:11.4}  {:17.4}",
            l + 1,
            ev.model.csi[0][l],
            ev.persistence.csi[0][l],
            ev.model.crps[l],
            ev.persistence.crps[l]
        );
    }
    println!(
        "mean CSI model {:.4} persistence {:.4}; total {:.0}s",
        ev.model.mean_csi(0),
        ev.persistence.mean_csi(0),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
