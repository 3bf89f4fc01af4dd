fn main() {
    std::process::exit(cardiomm::cli::main_with_args(std::env::args_os()));
}
