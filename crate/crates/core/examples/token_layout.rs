//! Patch tokens and how each attention stage regroups them, at desk and at
//! full resolution, including the Channel-To-Batch Shift of the conditions.
//!
//! ```text
//! cargo run --example token_layout
//! ```

use dtca::model::{ctbs, variant_plans, ModelConfig, Variant};
use dtca::tensor::{Graph, Tensor};
use dtca::tokenizer::PatchGrid;

fn main() -> dtca::Result<()> {
    let frame = Tensor::<f32>::from_vec(&[1, 1, 4, 4], (0..16).map(|v| v as f32).collect())?;
    let grid = PatchGrid::new(4, 4, 2)?;
    let tokens = grid.patchify(&frame)?;
    println!("4x4 frame, 2x2 patches -> tokens {:?}", tokens.shape());
    for (c, t) in tokens.data().chunks(4).enumerate() {
        println!("  token {c}: {t:?}");
    }

    for (label, cfg) in [("desk", ModelConfig::default()), ("full", ModelConfig::paper_scale())] {
        let (c, f, n) = (cfg.channels(), cfg.frames(), cfg.embed_dim);
        println!("\n{label}: C={c} tokens per frame, F={}+{} frames, N={n}", cfg.cond_frames, cfg.pred_frames);
        for v in Variant::ALL {
            let shapes: Vec<String> = variant_plans(v, 1, c, f, n)?
                .iter()
                .map(|p| format!("{:?}", p.output_shape()))
                .collect();
            println!("  {v:6} stages {}", shapes.join(" then "));
        }
    }

    let cfg = ModelConfig::default();
    let mut g = Graph::<f32>::new();
    let cond = g.constant(Tensor::zeros(&[2, cfg.channels(), cfg.cond_frames, cfg.embed_dim]));
    for s in [1, 4, 8, 16] {
        let shifted = ctbs(&mut g, cond, s)?;
        println!("CTBS s={s:2}: {:?} -> {:?}", g.shape(cond), g.shape(shifted));
    }
    Ok(())
}
