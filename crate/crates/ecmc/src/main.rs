fn main() {
    std::process::exit(ecmc::cli::run(std::env::args_os()));
}
