use clap::Parser;

fn main() {
    let cli = set_transport_cli::Cli::parse();
    std::process::exit(set_transport_cli::run(cli));
}
