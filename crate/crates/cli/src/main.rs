fn main() {
    std::process::exit(involute_cli::app::run(std::env::args_os()));
}
