use clap::Parser;

use mlfilter_cli::Cli;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match mlfilter_cli::run(&cli) {
        Ok(manifest) => {
            for o in &manifest.outputs {
                log::info!("wrote {}", cli.out.join(&o.file).display());
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
