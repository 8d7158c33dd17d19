fn main() {
    std::process::exit(equicaps::cli::run(std::env::args_os()));
}
