use clap::Parser;
use irda_cli::commands::{run, Cli};
use tracing_subscriber::EnvFilter;

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("IRDA_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    // Usage errors exit with status 2 from inside clap.
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
        eprintln!("{}", serde_json::json!({ "error": chain.join(": ") }));
        std::process::exit(1);
    }
}
