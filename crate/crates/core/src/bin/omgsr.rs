fn main() {
    std::process::exit(omgsr::cli::run(std::env::args_os()));
}
