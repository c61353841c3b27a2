use clap::Parser;
use dgae_cli::args::{Cli, Command};
use dgae_cli::{commands, exit_code, EXIT_USAGE};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            std::process::exit(if usage { EXIT_USAGE } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Dataset { common } => commands::cmd_dataset(common),
        Command::Train { stage, common, resume, from_scratch } => {
            commands::cmd_train(common, *stage, *resume, *from_scratch)
        }
        Command::Swap { common, a, b, attr } => commands::cmd_swap(common, a, b, attr.as_deref()).map(drop),
        Command::Recombine { common, donors, noise } => commands::cmd_recombine(common, donors, *noise).map(drop),
        Command::Interpolate { common, a, b, frames, attr } => {
            commands::cmd_interpolate(common, a, b, *frames, attr.as_deref()).map(drop)
        }
        Command::Eval { common } => commands::cmd_eval(common).map(drop),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}
