fn main() {
    std::process::exit(despos::cli::dispatch(std::env::args_os()));
}
