fn main() {
    std::process::exit(videojam::cli::run(std::env::args_os()));
}
