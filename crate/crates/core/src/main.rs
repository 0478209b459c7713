fn main() {
    env_logger::init();
    std::process::exit(covbal::cli::run(std::env::args_os()));
}
