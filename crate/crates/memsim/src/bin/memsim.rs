fn main() {
    std::process::exit(memsim::cli::run());
}
