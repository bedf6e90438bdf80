fn main() {
    std::process::exit(xfusion::cli::main_with_args(std::env::args_os()));
}
