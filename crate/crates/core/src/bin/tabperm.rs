fn main() {
    std::process::exit(tabperm::cli::run(std::env::args_os()));
}
