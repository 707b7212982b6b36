use clap::Parser;

fn main() {
    let cli = stok_cli::Cli::parse();
    match stok_cli::run(&cli) {
        Ok(Some(report)) => eprintln!("done in {:.1}s", report.wall_time_s),
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
