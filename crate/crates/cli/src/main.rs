fn main() {
    std::process::exit(kincycle_cli::cli::main_with_args(std::env::args_os()));
}
