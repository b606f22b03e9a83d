fn main() {
    std::process::exit(marginlab::cli::run(std::env::args_os()));
}
