fn main() {
    std::process::exit(hybridpar::cli::main());
}
