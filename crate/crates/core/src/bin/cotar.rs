fn main() {
    std::process::exit(cotar::cli::run(std::env::args_os()));
}
