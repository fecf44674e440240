fn main() {
    std::process::exit(stsurf::cli::run(std::env::args_os()));
}
