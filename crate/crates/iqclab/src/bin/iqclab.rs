fn main() {
    std::process::exit(iqclab::cli::run(std::env::args_os()));
}
