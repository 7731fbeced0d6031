fn main() {
    if let Err(e) = uapforge::cli::run_from_args() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
