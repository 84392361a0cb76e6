fn main() {
    std::process::exit(epicount::cli::run(std::env::args_os()));
}
