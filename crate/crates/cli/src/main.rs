fn main() {
    std::process::exit(forkscope_cli::run(std::env::args_os()));
}
