fn main() {
    std::process::exit(nucleus_ssl::cli::main_with(std::env::args_os()));
}
