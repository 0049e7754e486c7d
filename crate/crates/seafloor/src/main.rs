fn main() {
    std::process::exit(seafloor::cli::run());
}
