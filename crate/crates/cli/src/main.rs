use clap::Parser;

fn main() {
    let cli = occpose_cli::Cli::parse();
    if let Err(err) = occpose_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(occpose_cli::exit_code(&err));
    }
}
