fn main() {
    std::process::exit(colanet_cli::run(std::env::args_os()));
}
