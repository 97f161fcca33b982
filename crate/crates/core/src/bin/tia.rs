fn main() {
    std::process::exit(tia_core::cli::cli_main(std::env::args_os()));
}
