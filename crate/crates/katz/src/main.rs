fn main() {
    std::process::exit(katz::cli::run(std::env::args_os()));
}
