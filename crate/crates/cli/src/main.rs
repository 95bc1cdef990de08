fn main() {
    std::process::exit(hdldbg_cli::main_with_args(std::env::args_os()));
}
