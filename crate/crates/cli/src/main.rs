fn main() {
    std::process::exit(hybrid_ecm_cli::main_with_args(std::env::args_os()));
}
