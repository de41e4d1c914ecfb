fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRIDIT_LOG", "info")).init();
    std::process::exit(gridit_harness::cli::run_cli(std::env::args_os()));
}
