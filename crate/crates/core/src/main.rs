fn main() {
    std::process::exit(mtpc::cli::run(std::env::args_os()));
}
