fn main() {
    std::process::exit(reneging_lab::cli::run_from_args(std::env::args_os()));
}
