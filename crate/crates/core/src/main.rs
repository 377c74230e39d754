fn main() {
    std::process::exit(lindiff::cli::run());
}
