fn main() {
    std::process::exit(skipscope_cli::run(std::env::args_os()));
}
