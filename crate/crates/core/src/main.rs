fn main() {
    std::process::exit(flowplan::cli::run(std::env::args_os()));
}
