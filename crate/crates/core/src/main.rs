fn main() {
    std::process::exit(catsd::cli::main());
}
