fn main() {
    std::process::exit(lprobe::cli::main_with_args(std::env::args_os()));
}
