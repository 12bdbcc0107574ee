fn main() {
    std::process::exit(freqboot::cli::run(std::env::args_os()));
}
