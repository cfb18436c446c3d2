fn main() {
    std::process::exit(leafnet::cli::run(std::env::args_os()));
}
