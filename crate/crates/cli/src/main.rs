fn main() {
    std::process::exit(wemix_cli::run(std::env::args_os()));
}
