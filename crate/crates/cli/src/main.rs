fn main() {
    std::process::exit(semiformer_cli::main_with_args(std::env::args_os()));
}
