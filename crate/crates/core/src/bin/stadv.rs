fn main() {
    std::process::exit(stadv_core::cli::run(std::env::args_os()));
}
