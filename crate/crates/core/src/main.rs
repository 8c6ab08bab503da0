fn main() {
    std::process::exit(fliplearn::harness::main_with_args(std::env::args_os()));
}
