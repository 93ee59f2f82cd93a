fn main() {
    std::process::exit(georbf::cli::run(std::env::args_os()));
}
