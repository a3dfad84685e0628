fn main() {
    std::process::exit(splitplot::cli_io::main_with_args(std::env::args_os()));
}
