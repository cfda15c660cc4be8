fn main() {
    std::process::exit(flipbench::cli::run(std::env::args_os()));
}
