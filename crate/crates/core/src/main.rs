fn main() {
    std::process::exit(brq_core::cli::run(std::env::args_os()));
}
