use clap::Parser;

fn main() {
    let cli = dpt_cli::Cli::parse();
    if let Err(e) = dpt_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
