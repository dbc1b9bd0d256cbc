fn main() {
    std::process::exit(htrmrl::cli::main_with(std::env::args_os()));
}
