fn main() {
    std::process::exit(lfm3d::cli::run(std::env::args_os()));
}
