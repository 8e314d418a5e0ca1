fn main() {
    std::process::exit(hctts::cli::run(std::env::args_os()));
}
