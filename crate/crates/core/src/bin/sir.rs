fn main() {
    std::process::exit(sir::cli::main_with_args(std::env::args_os()));
}
