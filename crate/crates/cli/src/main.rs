fn main() {
    std::process::exit(ctdf_cli::main_entry(std::env::args()));
}
