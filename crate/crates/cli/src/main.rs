use clap::Parser;

fn main() {
    let cli = eliot_cli::Cli::parse();
    let result = eliot_cli::run(cli);
    if let Err(e) = &result {
        eprintln!("error: {e:#}");
    }
    std::process::exit(eliot_cli::exit_code(&result));
}
