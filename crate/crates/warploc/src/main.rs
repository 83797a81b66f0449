fn main() {
    std::process::exit(warploc::cli::run());
}
