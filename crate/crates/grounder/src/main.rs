fn main() {
    std::process::exit(grounder::cli::main());
}
