fn main() {
    std::process::exit(ade::cli::run(std::env::args_os()));
}
