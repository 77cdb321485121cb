fn main() {
    std::process::exit(covren_core::cli::run(std::env::args_os()));
}
