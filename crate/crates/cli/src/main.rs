use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = renovate_cli::Cli::parse();
    if let Err(e) = renovate_cli::dispatch(cli) {
        eprintln!("{}", renovate_cli::error_body(&e));
        std::process::exit(1);
    }
}
