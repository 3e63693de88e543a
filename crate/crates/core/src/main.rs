fn main() {
    std::process::exit(kfdiff::cli::dispatch(std::env::args_os().collect()));
}
