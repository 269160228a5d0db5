fn main() {
    std::process::exit(ntklab::cli::run(std::env::args_os()));
}
