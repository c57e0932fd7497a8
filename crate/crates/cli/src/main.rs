fn main() {
    std::process::exit(dipmark_cli::run(std::env::args_os()));
}
