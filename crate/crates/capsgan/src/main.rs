fn main() {
    std::process::exit(capsgan::cli::main());
}
