fn main() {
    std::process::exit(csmpc::cli::dispatch(std::env::args().skip(1)));
}
