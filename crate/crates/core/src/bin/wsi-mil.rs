fn main() {
    std::process::exit(wsi_mil::cli::run(std::env::args_os()));
}
