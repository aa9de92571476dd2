fn main() {
    std::process::exit(drmn::cli::main_with_args(std::env::args_os()));
}
