fn main() {
    std::process::exit(pccl::cli::run(std::env::args_os()));
}
