fn main() {
    std::process::exit(analysparse::cli::main_with(std::env::args_os()));
}
