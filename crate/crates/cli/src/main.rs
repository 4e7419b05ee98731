fn main() {
    std::process::exit(mambasam_cli::dispatch(std::env::args_os()));
}
