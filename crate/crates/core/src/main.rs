fn main() {
    std::process::exit(pointcorr::cli::run(std::env::args().skip(1).collect()));
}
