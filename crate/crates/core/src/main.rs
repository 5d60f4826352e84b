fn main() {
    std::process::exit(tpfp::cli::run(std::env::args_os()));
}
