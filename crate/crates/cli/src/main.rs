use clap::Parser;

fn main() {
    let cli = psla_cli::Cli::parse();
    if let Err(e) = psla_cli::run(cli) {
        eprintln!("{}", e.machine_line());
        std::process::exit(e.exit_code());
    }
}
