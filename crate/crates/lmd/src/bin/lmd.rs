use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.is_empty() || args[0] == "--help" || args[0] == "-h" {
        eprintln!(
            "usage: lmd <train|eval|diagnose|sweep|ablate> [--config <path>] [--out <dir>] \
             [--seed <u64>] [--oracle on|off] [key=value ...]"
        );
        return if args.is_empty() { ExitCode::from(2) } else { ExitCode::SUCCESS };
    }
    let cfg = match lmd::cli::parse_args(&args) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("lmd: {e}");
            return ExitCode::from(2);
        }
    };
    match lmd::cli::run(&cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lmd: {e}");
            ExitCode::FAILURE
        }
    }
}
