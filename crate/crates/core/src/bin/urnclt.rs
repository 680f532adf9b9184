fn main() {
    std::process::exit(urnclt::cli::run(std::env::args_os()));
}
