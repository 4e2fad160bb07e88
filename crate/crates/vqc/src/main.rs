fn main() {
    std::process::exit(vqc::cli::run());
}
