fn main() {
    std::process::exit(tracelens::cli::run(std::env::args_os()));
}
