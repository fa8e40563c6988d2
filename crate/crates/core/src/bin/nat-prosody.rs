fn main() {
    std::process::exit(nat_prosody::cli::main_with_args(std::env::args_os()));
}
