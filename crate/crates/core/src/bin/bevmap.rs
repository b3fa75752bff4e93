fn main() {
    // CLI wiring lands with the cli module.
    eprintln!("bevmap: not yet wired");
    std::process::exit(1);
}
