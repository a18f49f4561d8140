fn main() {
    std::process::exit(mtl_core::cli::run(std::env::args_os()));
}
