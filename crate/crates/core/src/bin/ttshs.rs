fn main() {
    std::process::exit(ttshs::cli::run(std::env::args_os()));
}
