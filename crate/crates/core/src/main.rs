fn main() {
    std::process::exit(abov::cli::main_with(std::env::args_os()));
}
