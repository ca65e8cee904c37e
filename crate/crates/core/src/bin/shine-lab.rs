fn main() {
    std::process::exit(shine_lab::cli::cli_entry(std::env::args_os()));
}
