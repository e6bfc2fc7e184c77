fn main() { std::process::exit(codeps::cli::run_cli(&std::env::args().collect::<Vec<_>>())); }
