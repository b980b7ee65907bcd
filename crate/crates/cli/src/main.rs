use clap::Parser;
use dpabc_cli::{criteria::Status, run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            for c in &report.criteria {
                println!("{}", c.line());
            }
            for f in &report.files {
                println!("wrote {f}");
            }
            if report.criteria.iter().any(|c| c.status == Status::Fail) {
                std::process::exit(1);
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
