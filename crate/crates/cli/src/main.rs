use clap::Parser;

use spg_cli::{run, Cli};

fn main() {
    let env = env_logger::Env::new().filter_or("SPG_LOG_LEVEL", "warn");
    env_logger::Builder::from_env(env).format_timestamp(None).init();

    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            if cli.command.common().out.is_none() || matches!(cli.command, spg_cli::Command::Gen(_)) {
                print!("{text}");
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(h) = e.hint() {
                eprintln!("hint: {h}");
            }
            std::process::exit(e.exit_code());
        }
    }
}
