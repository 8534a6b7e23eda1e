use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = svar_cli::Cli::parse();
    match svar_cli::run(cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            std::process::exit(e.exit_code());
        }
    }
}
