fn main() {
    std::process::exit(forgenas::cli::main_with_args(std::env::args_os()));
}
