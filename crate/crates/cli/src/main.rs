fn main() {
    std::process::exit(refvsr_cli::run(std::env::args_os()));
}
