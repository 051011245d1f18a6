fn main() {
    std::process::exit(stereoisp_cli::run(std::env::args_os()));
}
