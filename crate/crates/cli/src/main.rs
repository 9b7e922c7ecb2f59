fn main() {
    std::process::exit(scopf_cli::run(std::env::args_os()));
}
