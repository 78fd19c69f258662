fn main() {
    std::process::exit(diffident::cli::run(std::env::args_os()));
}
