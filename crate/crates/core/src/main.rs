use std::process::ExitCode;

use clap::Parser;
use soundsieve::cli::{run_pipeline, Action, Cli, Command, StageArgs};
use soundsieve::fixture::{generate_corpus, FixtureSpec};

fn stage(args: &StageArgs, commands: &[Command]) -> Result<(), soundsieve::cli::PipelineError> {
    let config = args.load_config()?;
    for &c in commands {
        let out = run_pipeline(&config, c)?;
        for p in &out.artifacts {
            log::debug!("wrote {}", p.display());
        }
        if c == Command::Report {
            let md = config.work_dir.join("reports").join(format!("{}_report.md", config.family));
            if let Ok(text) = std::fs::read_to_string(md) {
                print!("{text}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.action {
        Action::Extract(a) => stage(a, &[Command::Extract]),
        Action::Train(a) => stage(a, &[Command::Train]),
        Action::Score(a) => stage(a, &[Command::Score]),
        Action::Evaluate(a) => stage(a, &[Command::Evaluate]),
        Action::Report(a) => stage(a, &[Command::Report]),
        Action::All(a) => stage(a, &Command::ALL),
        Action::MakeFixture { out, seed, train, test } => {
            let spec = FixtureSpec {
                n_train: *train,
                n_test_normal: *test,
                n_test_anomaly: *test,
                seed: *seed,
                ..FixtureSpec::default()
            };
            match generate_corpus(out, &spec) {
                Ok(n) => {
                    log::info!("wrote {n} files under {}", out.display());
                    return ExitCode::SUCCESS;
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
