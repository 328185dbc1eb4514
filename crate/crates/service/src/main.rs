use clap::Parser;

#[derive(Parser)]
#[command(name = "cdmp-service", version, about = "HTTP service for constrained DMP workspaces")]
struct Cli {
    #[command(flatten)]
    config: cdmp_service::Config,
}

#[tokio::main]
async fn main() {
    let cli = Cli::parse();
    if let Err(e) = cdmp_service::run(cli.config).await {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
