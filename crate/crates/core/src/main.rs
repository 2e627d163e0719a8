fn main() {
    std::process::exit(wavcube::cli::main_with_args(std::env::args_os()));
}
