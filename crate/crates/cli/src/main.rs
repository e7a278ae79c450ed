use clap::Parser;

use imstab_cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    let result = run(&cli);
    match &result {
        Ok(o) => {
            println!("{}", o.written.report.display());
            if !o.verdict {
                eprintln!("imstab: verdict failed");
            }
        }
        Err(e) => eprintln!("imstab: error: {e}"),
    }
    std::process::exit(exit_code(&result));
}
