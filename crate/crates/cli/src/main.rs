use clap::Parser;

fn main() {
    let cli = atrl_cli::Cli::parse();
    let mut stdout = std::io::stdout().lock();
    if let Err(err) = atrl_cli::run(cli, &mut stdout) {
        eprintln!("error: {err:#}");
        std::process::exit(atrl_cli::exit_code(&err));
    }
}
