fn main() {
    std::process::exit(hsairy::cli::dispatch(std::env::args_os()));
}
