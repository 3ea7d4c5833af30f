fn main() {
    std::process::exit(unist_cli::main_with_args(std::env::args_os()));
}
