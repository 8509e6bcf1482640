fn main() {
    std::process::exit(strip_mlp::cli::run(std::env::args_os()));
}
