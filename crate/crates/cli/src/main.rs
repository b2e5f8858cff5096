fn main() {
    std::process::exit(entropy_net_cli::run(std::env::args_os()));
}
