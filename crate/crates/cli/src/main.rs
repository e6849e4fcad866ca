fn main() {
    std::process::exit(iwlab::cli_main(std::env::args_os()));
}
