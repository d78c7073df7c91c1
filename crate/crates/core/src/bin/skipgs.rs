fn main() {
    std::process::exit(skipgs::cli::run(std::env::args_os()));
}
