fn main() {
    std::process::exit(cac::cli::run(std::env::args_os()));
}
