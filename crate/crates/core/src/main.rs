use clap::Parser;

use spider_lab::cli::{self, Cli};

fn main() {
    let cli = Cli::parse();
    std::process::exit(cli::run(&cli));
}
