fn main() {
    std::process::exit(brainenc::cli::run(std::env::args_os()));
}
