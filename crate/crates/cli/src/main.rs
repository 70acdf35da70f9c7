fn main() {
    let code = ope_cli::cli_main(std::env::args());
    std::process::exit(code);
}
