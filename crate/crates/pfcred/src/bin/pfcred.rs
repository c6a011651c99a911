fn main() {
    std::process::exit(pfcred::cli::run());
}
