use clap::Parser;
use nawt::cli::{run, CliArgs};

fn main() {
    let args = CliArgs::parse();
    std::process::exit(run(&args));
}
