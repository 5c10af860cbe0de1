fn main() {
    std::process::exit(koopman_bilqr::cli::run(std::env::args_os()));
}
