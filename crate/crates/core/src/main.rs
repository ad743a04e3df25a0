fn main() {
    std::process::exit(s2m::cli::run_from_args(std::env::args_os()));
}
