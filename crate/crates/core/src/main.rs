fn main() {
    std::process::exit(avfusion::cli::main_with(std::env::args_os()));
}
