fn main() {
    std::process::exit(spikedistill::cli::run(std::env::args_os()));
}
