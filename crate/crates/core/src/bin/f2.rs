fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(f2_core::cli::run_command(&argv));
}
