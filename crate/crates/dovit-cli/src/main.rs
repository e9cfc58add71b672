fn main() {
    // Subcommands are wired up once the engine crate is complete.
}
