fn main() {
    std::process::exit(irtest::cli::main_with_args(std::env::args_os()));
}
