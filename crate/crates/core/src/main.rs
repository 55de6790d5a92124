fn main() {
    std::process::exit(otfeat::cli::run(std::env::args_os()));
}
