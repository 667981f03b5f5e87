fn main() {
    std::process::exit(artaug_cli::dispatch(std::env::args_os()));
}
