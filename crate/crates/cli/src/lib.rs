pub mod args;
pub mod commands;
pub mod service;

use anyhow::Result;

use crate::args::{Cli, Command};

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Label(a) => commands::label(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Stats(a) => commands::stats(&a),
        Command::Train(a) => commands::train_cmd(&a),
        Command::Eval(a) => commands::eval(&a).map(drop),
        Command::Compare(a) => commands::compare(&a).map(drop),
        Command::Recommend(a) => commands::recommend(&a).map(drop),
        Command::Inject(a) => commands::inject(&a).map(drop),
        Command::Serve(a) => commands::serve(&a),
    }
}
