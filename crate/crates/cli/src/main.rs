fn main() {
    std::process::exit(dscnet_cli::run(std::env::args_os()));
}
