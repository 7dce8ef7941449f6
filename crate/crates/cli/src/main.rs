fn main() {
    std::process::exit(robgan_cli::run(std::env::args_os()));
}
