fn main() {
    std::process::exit(mkor::cli::main());
}
