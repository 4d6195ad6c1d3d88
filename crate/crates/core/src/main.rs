fn main() {
    std::process::exit(imblab::cli::main());
}
