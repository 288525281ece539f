//! Trains briefly, writes a checkpoint, reloads it and draws an ensemble
//! forecast with a respaced sampling chain.
//!
//! ```text
//! cargo run --release --example sample -- [train_steps] [members]
//! ```

use dtca::cli::RunConfig;
use dtca::data::gen_synthetic;
use dtca::model::{load_checkpoint, save_checkpoint};
use dtca::pipeline::{sample_members, Trainer};

fn main() -> dtca::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::default();
    cfg.train.steps = args.next().map_or(50, |s| s.parse().expect("train_steps"));
    cfg.sample.ensemble = args.next().map_or(4, |s| s.parse().expect("members"));
    cfg.sample.steps = 25;
    let (h, w) = (cfg.model.height, cfg.model.width);

    let seqs = (0..32)
        .map(|i| gen_synthetic(&cfg.blobs, cfg.data.seq_frames, h, w, i))
        .collect::<dtca::Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(&cfg)?;
    let losses = trainer.train(&seqs, |_, _| Ok(()))?;
    println!("trained {} steps, final loss {:.4}", losses.len(), losses.last().map_or(f64::NAN, |l| l.1));

    let path = std::env::temp_dir().join("dtca_example.dtca");
    save_checkpoint(&path, &trainer.to_checkpoint())?;
    let restored = Trainer::from_checkpoint(&load_checkpoint(&path)?)?;
    println!("checkpoint {} reloaded at step {}", path.display(), restored.step());

    let window = gen_synthetic(&cfg.blobs, cfg.model.frames(), h, w, 99)?;
    let cond = window.window(0, cfg.model.cond_frames)?;
    let members = sample_members(&restored.model, &cond, &cfg)?;
    let truth = window.window(cfg.model.cond_frames, cfg.model.pred_frames)?.area_means();
    println!("area-mean rain (mm/h) per lead, observed then each member:");
    println!("  observed  {}", truth.iter().map(|v| format!("{v:7.3}")).collect::<String>());
    for (k, m) in members.iter().enumerate() {
        println!("  member {k}  {}", m.area_means().iter().map(|v| format!("{v:7.3}")).collect::<String>());
    }
    std::fs::remove_file(&path)?;
    Ok(())
}
