fn main() {
    std::process::exit(nar::cli::run(std::env::args_os()));
}
