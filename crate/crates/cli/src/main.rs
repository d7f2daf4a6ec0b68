fn main() {
    std::process::exit(g2sf_cli::run_from(std::env::args_os()));
}
