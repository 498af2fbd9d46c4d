fn main() {
    std::process::exit(difc::cli_main());
}
