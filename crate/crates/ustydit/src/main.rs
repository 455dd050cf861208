fn main() {
    std::process::exit(ustydit::cli::run(std::env::args_os()));
}
