fn main() {
    std::process::exit(snerf::cli::dispatch(std::env::args_os()));
}
