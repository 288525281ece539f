//! Runs the ablation axes (four block variants, CTBS shifts 0/4/8/16 and the
//! model without causal attention) with a short training budget and prints
//! one comparable score line per run. Rankings at this budget are noise.
//!
//! ```text
//! cargo run --release --example ablation -- [train_steps]
//! ```

use dtca::cli::RunConfig;
use dtca::data::gen_synthetic;
use dtca::pipeline::{ablation_grid, evaluate, Trainer};

fn main() -> dtca::Result<()> {
    let mut base = RunConfig::default();
    base.train.steps = std::env::args().nth(1).map_or(40, |s| s.parse().expect("train_steps"));
    base.sample.ensemble = 2;
    base.sample.steps = 20;
    base.eval.thresholds = vec![1.0];
    let (h, w) = (base.model.height, base.model.width);
    let train = (0..64)
        .map(|i| gen_synthetic(&base.blobs, base.data.seq_frames, h, w, i))
        .collect::<dtca::Result<Vec<_>>>()?;
    let windows = (0..4)
        .map(|i| gen_synthetic(&base.blobs, base.model.frames(), h, w, 900_000 + i))
        .collect::<dtca::Result<Vec<_>>>()?;

    println!("{:14} {:>8} {:>8} {:>8} {:>10}", "run", "params", "CSI@1", "FSS@1", "CRPS");
    for (name, cfg) in ablation_grid(&base) {
        let mut trainer = Trainer::new(&cfg)?;
        trainer.train(&train, |_, _| Ok(()))?;
        let rep = evaluate(&trainer.model, &windows, &cfg)?.model;
        println!(
            "{name:14} {:8} {:8.4} {:8.4} {:10.4}",
            trainer.model.params().count(),
            rep.mean_csi(0),
            rep.mean_fss(0),
            rep.mean_crps()
        );
    }
    Ok(())
}
