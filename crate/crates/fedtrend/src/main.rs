fn main() {
    std::process::exit(fedtrend::cli::main());
}
