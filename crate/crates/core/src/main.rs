use clap::Parser;

fn main() {
    let cli = mamd::cli::Cli::parse();
    if let Err(err) = mamd::cli::run(cli) {
        eprintln!("{}", serde_json::json!({ "error": format!("{err:#}") }));
        std::process::exit(1);
    }
}
