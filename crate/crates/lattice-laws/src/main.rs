fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(lattice_laws::cli::run_cli(args));
}
