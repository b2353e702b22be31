fn main() {
    std::process::exit(mec_migrate::cli::run(std::env::args_os()));
}
