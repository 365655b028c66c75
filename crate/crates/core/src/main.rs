use clap::Parser;

use splat_inpaint::workbench::cli::{error_line, run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("{}", error_line(&e));
            std::process::exit(1);
        }
    }
}
