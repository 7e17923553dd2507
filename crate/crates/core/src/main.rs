fn main() {
    std::process::exit(gibly::cli::run(std::env::args_os()));
}
