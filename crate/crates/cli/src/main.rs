fn main() {
    std::process::exit(dlsc_cli::run(std::env::args_os()));
}
