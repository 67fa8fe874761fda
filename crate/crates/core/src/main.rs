fn main() {
    std::process::exit(dgt_core::cli::main_with(std::env::args_os()));
}
