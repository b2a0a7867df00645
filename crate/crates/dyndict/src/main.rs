fn main() {
    std::process::exit(dyndict::cli::main_with(std::env::args_os()));
}
