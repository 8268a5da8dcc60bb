fn main() {
    std::process::exit(moe_cgan::cli::main_with_args(std::env::args_os()));
}
