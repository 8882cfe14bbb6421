fn main() {
    std::process::exit(mkv_core::cli::run(std::env::args_os()));
}
