fn main() {
    std::process::exit(navigator::cli::dispatch(std::env::args()));
}
