fn main() {
    std::process::exit(nemf::cli::main_with_args(std::env::args_os()));
}
