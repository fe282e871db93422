fn main() {
    std::process::exit(contrastive_dynamics::cli::run_cli(std::env::args_os()));
}
