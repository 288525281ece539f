use clap::Parser;
use dtca::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    let mut log = String::new();
    let result = run(cli, &mut log);
    print!("{log}");
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
