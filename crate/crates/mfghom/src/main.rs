fn main() {
    std::process::exit(mfghom::cli::main_with_args(std::env::args_os()));
}
