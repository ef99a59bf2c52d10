fn main() {
    std::process::exit(vitae_cli::run(std::env::args_os()));
}
