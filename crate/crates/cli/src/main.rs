use clap::Parser;

use aigc_alloc_cli::{run, Cli, CliError};

fn main() {
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            match &e {
                CliError::Core(aigc_alloc::Error::NonFinite(_)) => {
                    eprintln!("error: aborting: {e}")
                }
                _ => eprintln!("error: {e}"),
            }
            e.exit_code()
        }
    };
    std::process::exit(code);
}
