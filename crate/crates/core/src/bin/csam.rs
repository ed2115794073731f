fn main() {
    std::process::exit(csam::cli::run_from_args(std::env::args_os()));
}
