use cvaeseg::cli;
use cvaeseg::verify::VerifyOptions;

fn main() {
    std::process::exit(cli::run(std::env::args_os(), VerifyOptions::default()));
}
