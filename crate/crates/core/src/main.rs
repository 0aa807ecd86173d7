fn main() {
    std::process::exit(stainkit::cli::run(std::env::args_os()));
}
