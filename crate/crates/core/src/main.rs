fn main() {
    std::process::exit(progfam::cli::main_with_args(std::env::args_os()));
}
