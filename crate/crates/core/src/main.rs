fn main() {
    std::process::exit(famadapt::cli::main_with_args(std::env::args_os()));
}
