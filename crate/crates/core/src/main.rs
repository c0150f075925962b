fn main() {
    std::process::exit(l2skd_core::cli::run(std::env::args_os()));
}
