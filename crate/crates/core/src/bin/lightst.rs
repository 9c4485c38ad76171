use clap::Parser;
use lightst::cli::{run, Cli};

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            println!("run directory: {}", outcome.run_dir.display());
            std::process::ExitCode::SUCCESS
        }
        Err((dir, record)) => {
            let json = serde_json::to_string(&record).unwrap_or_else(|_| record.message.clone());
            eprintln!("{json}");
            if let Some(d) = dir {
                eprintln!("error record: {}", d.join("error.json").display());
            }
            std::process::ExitCode::FAILURE
        }
    }
}
