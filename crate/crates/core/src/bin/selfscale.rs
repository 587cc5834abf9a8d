fn main() {
    env_logger::init();
    std::process::exit(selfscale::cli::main_with(std::env::args_os()));
}
