fn main() {
    std::process::exit(pymamba::run_cli());
}
