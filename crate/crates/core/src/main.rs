fn main() {
    std::process::exit(optical_adv::bench::cli::cli_main(std::env::args_os()));
}
