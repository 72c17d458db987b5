fn main() {
    std::process::exit(storyviz::cli::main_with_args(std::env::args_os()));
}
