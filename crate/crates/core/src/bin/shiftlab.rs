fn main() {
    std::process::exit(shiftlab::cli::run(std::env::args_os()));
}
