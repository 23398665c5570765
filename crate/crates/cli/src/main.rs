fn main() {
    std::process::exit(sgn_cli::run_cli(std::env::args_os()));
}
