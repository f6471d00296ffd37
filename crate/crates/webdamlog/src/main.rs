fn main() {
    webdamlog::cli::main();
}
