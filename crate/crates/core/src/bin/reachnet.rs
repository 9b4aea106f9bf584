fn main() {
    std::process::exit(reachnet::cli::main_with_args(std::env::args_os()));
}
