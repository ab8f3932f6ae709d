fn main() {
    std::process::exit(rectnet::cli::run(std::env::args_os()));
}
