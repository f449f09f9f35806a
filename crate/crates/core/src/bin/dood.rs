fn main() {
    std::process::exit(dood::cli::main_from(std::env::args_os()));
}
