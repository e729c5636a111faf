fn main() {
    std::process::exit(pathrl::cli::main_with_args(std::env::args()));
}
