//! Cosine similarity between forecast and observed tokens: spatial and
//! temporal self-similarity and the per-frame prediction-vs-observed trace.
//!
//! ```text
//! cargo run --release --example token_similarity -- [train_steps]
//! ```

use dtca::cli::RunConfig;
use dtca::data::gen_synthetic;
use dtca::pipeline::{sample_members, token_analysis, Trainer};

fn main() -> dtca::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.train.steps = std::env::args().nth(1).map_or(50, |s| s.parse().expect("train_steps"));
    cfg.sample.ensemble = 1;
    cfg.sample.steps = 25;
    let (h, w) = (cfg.model.height, cfg.model.width);
    let seqs = (0..32)
        .map(|i| gen_synthetic(&cfg.blobs, cfg.data.seq_frames, h, w, i))
        .collect::<dtca::Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(&cfg)?;
    trainer.train(&seqs, |_, _| Ok(()))?;

    let window = gen_synthetic(&cfg.blobs, cfg.model.frames(), h, w, 4242)?;
    let cond = window.window(0, cfg.model.cond_frames)?;
    let forecast = sample_members(&trainer.model, &cond, &cfg)?.remove(0);
    for (name, m) in token_analysis(&trainer.model, &window, &forecast, &cfg)? {
        println!(
            "{name}: {}x{}, diagonal mean {:.4}, matrix mean {:.4}",
            m.rows,
            m.cols,
            m.global_mean(),
            m.matrix_mean()
        );
        if m.rows <= 8 {
            for i in 0..m.rows {
                let row: String = (0..m.cols).map(|j| format!("{:8.4}", m.get(i, j))).collect();
                println!("  {row}");
            }
        }
    }
    Ok(())
}
