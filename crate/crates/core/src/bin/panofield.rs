fn main() {
    std::process::exit(panofield::cli::run(std::env::args_os()));
}
