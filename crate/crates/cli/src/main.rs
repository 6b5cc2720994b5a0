use clap::Parser;

fn main() {
    let cli = sinkprune::pipeline::Cli::parse();
    if let Err(e) = sinkprune::pipeline::run(cli) {
        // Single-line machine-parsable error on stderr.
        let msg: String = format!("{e:#}").replace('\n', " ");
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}
