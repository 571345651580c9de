fn main() {
    std::process::exit(liteie_cli::run_cli(std::env::args_os()));
}
