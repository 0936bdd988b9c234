fn main() {
    std::process::exit(tcpa::cli::run(std::env::args_os()));
}
