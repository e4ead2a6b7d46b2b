fn main() {
    std::process::exit(axial_fusion::cli::cli_main(std::env::args_os()));
}
