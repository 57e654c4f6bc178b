fn main() {
    std::process::exit(ohd_cli::run(std::env::args_os()));
}
