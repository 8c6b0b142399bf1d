fn main() {
    std::process::exit(colddamp::cli::main_with_args(std::env::args_os()));
}
