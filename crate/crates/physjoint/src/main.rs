use clap::Parser;

fn main() {
    let cli = physjoint::cli::Cli::parse();
    if let Err(e) = physjoint::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
