//! Synthetic advecting storms: generates a sequence, saves and reloads it
//! as RSEQ, and draws a few frames as text.
//!
//! ```text
//! cargo run --example gen_data -- [seed]
//! ```

use dtca::data::{gen_synthetic, BlobParams, Normalizer, RadarSequence};

fn render(seq: &RadarSequence, f: usize) {
    let shades = [' ', '.', ':', 'o', 'O', '#'];
    for y in 0..seq.height() {
        let row: String = (0..seq.width())
            .map(|x| {
                let v = seq.at(f, y, x);
                let i = if v < 0.1 { 0 } else { ((v.ln() + 3.0).max(1.0) as usize).min(shades.len() - 1) };
                shades[i]
            })
            .collect();
        println!("  |{row}|");
    }
}

fn main() -> dtca::Result<()> {
    let seed = std::env::args().nth(1).map_or(7, |s| s.parse().expect("seed"));
    let params = BlobParams::default();
    let seq = gen_synthetic(&params, 6, 24, 24, seed)?;

    let path = std::env::temp_dir().join(format!("dtca_example_{seed}.rseq"));
    seq.save(&path)?;
    let back = RadarSequence::load(&path)?;
    assert_eq!(back, seq);
    println!("saved {} frames of {}x{} to {} and read them back", seq.frames(), seq.height(), seq.width(), path.display());

    let norm = Normalizer::new(32.0)?;
    for (f, m) in seq.area_means().iter().enumerate() {
        let peak = seq.frame(f).iter().cloned().fold(0.0f32, f32::max);
        println!("frame {f}: area mean {m:.3} mm/h, peak {peak:.2} mm/h (normalized {:+.3})", norm.forward(peak as f64));
    }
    for f in [0, seq.frames() - 1] {
        println!("frame {f}:");
        render(&seq, f);
    }
    std::fs::remove_file(&path)?;
    Ok(())
}
