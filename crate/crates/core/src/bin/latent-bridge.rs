fn main() {
    std::process::exit(latent_bridge::cli::main_with(std::env::args_os()));
}
