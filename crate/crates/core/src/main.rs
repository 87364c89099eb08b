fn main() {
    std::process::exit(mfg_forge::cli::main_with_args(std::env::args_os()));
}
