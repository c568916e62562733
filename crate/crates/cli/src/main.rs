fn main() {
    std::process::exit(testgen_cli::run_cli(std::env::args_os()));
}
