fn main() {
    std::process::exit(medose::cli::run(std::env::args_os()));
}
