use clap::Parser;
use ibis_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
        }
        Err(e) => {
            eprintln!("ibis: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
