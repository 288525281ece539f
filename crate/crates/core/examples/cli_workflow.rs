//! The command-line workflow driven in-process: gen-data, train, sample,
//! eval, analyze-tokens and spectrum into a scratch directory.
//!
//! ```text
//! cargo run --release --example cli_workflow
//! ```

use clap::Parser;
use dtca::cli::{run, Cli};

fn dtca(args: &[&str]) -> dtca::Result<()> {
    println!("$ dtca {}", args.join(" "));
    let cli = Cli::try_parse_from(std::iter::once("dtca").chain(args.iter().copied())).expect("valid arguments");
    let mut log = String::new();
    run(cli, &mut log)?;
    print!("{log}");
    Ok(())
}

fn main() -> dtca::Result<()> {
    let dir = std::env::temp_dir().join("dtca_cli_workflow");
    let _ = std::fs::remove_dir_all(&dir);
    let d = |p: &str| dir.join(p).to_string_lossy().into_owned();
    let small = ["--set", "embed_dim=32", "--set", "depth=2", "--set", "train_steps=30"];

    dtca(&["gen-data", "--out", &d("data"), "--count", "16", "--seed", "1"])?;
    let (data, out) = (d("data"), d("run"));
    let mut train = vec!["train", "--data", &data, "--out", &out];
    train.extend(small);
    dtca(&train)?;
    let ck = d("run/checkpoint.dtca");
    let cond = d("data/seq_00003.rseq");
    dtca(&["sample", "--checkpoint", &ck, "--conditions", &cond, "--ensemble", "3", "--steps", "20", "--seed", "5", "--out", &d("forecast")])?;
    dtca(&["eval", "--forecasts", &d("forecast"), "--truth", &cond, "--truth-offset", "2", "--out", &d("report")])?;
    dtca(&["analyze-tokens", "--a", &cond, "--b", &d("data/seq_00004.rseq"), "--mode", "temporal", "--out", &d("tokens")])?;
    dtca(&["spectrum", "--input", &cond, "--out", &d("spectrum.csv")])?;
    println!("outputs in {}", dir.display());
    Ok(())
}
