fn main() {
    std::process::exit(cusp_pressure::cli::run_from(std::env::args_os()));
}
