fn main() {
    std::process::exit(mqm_ape::cli::cli_dispatch(std::env::args_os()));
}
