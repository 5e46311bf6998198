fn main() {
    std::process::exit(fas::cli::main_from(std::env::args_os()));
}
