fn main() {
    std::process::exit(seismoforge::cli::run(std::env::args_os()));
}
