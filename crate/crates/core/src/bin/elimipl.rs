fn main() {
    std::process::exit(elimipl::cli::dispatch(std::env::args()));
}
