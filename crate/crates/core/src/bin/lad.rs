fn main() {
    std::process::exit(lad::cli::run(std::env::args_os()));
}
