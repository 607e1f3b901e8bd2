fn main() {
    std::process::exit(sinewich::cli::run(std::env::args_os()));
}
