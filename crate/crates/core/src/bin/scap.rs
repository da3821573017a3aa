use clap::Parser;

fn main() {
    let cli = scap::cli::Cli::parse();
    match scap::cli::run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("scap: {msg}");
            std::process::exit(1);
        }
    }
}
