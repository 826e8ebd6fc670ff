fn main() {
    std::process::exit(awjm::cli::main_with_args(std::env::args_os()));
}
