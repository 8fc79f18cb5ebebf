fn main() {
    std::process::exit(dvs_core::cli::run(std::env::args_os()));
}
