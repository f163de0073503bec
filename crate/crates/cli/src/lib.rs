//! Command-line driver: configuration, run orchestration, checkpoints and
//! CSV/SVG output.

pub mod args;
pub mod checkpoint;
pub mod error;
mod game_cmds;
pub mod output;
mod queue_cmds;
pub mod svg;

use std::ffi::OsString;
use std::io::Write;

use clap::Parser;

pub use error::{CliError, Result};

use args::{Cli, Command};

/// Runs one command line and returns the process exit code. Output goes to
/// `stdout`, diagnostics to `stderr`.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match args::merged_argv(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    2
                }
            };
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let name = command.name();
    match command {
        Command::TrainGame(a) => {
            game_cmds::train_game(&a, &output::out_dir(a.out.as_deref(), name), out)
        }
        Command::Oracle(a) => game_cmds::oracle(&a, out),
        Command::BellCheck(a) => game_cmds::bell_check(&a, out),
        Command::ReproduceTable1(a) => {
            game_cmds::reproduce_table1(&a, &output::out_dir(a.out.as_deref(), name), out)
        }
        Command::Eval(a) => match a.game {
            Some(_) => game_cmds::eval_game(&a, out),
            None => queue_cmds::eval_router(&a, out),
        },
        Command::TrainQueueing(a) => {
            queue_cmds::train_queueing(&a, &output::out_dir(a.out.as_deref(), name), out, err)
        }
        Command::CompareCoordinators(a) => {
            queue_cmds::compare_coordinators(&a, &output::out_dir(a.out.as_deref(), name), out, err)
        }
    }
}
