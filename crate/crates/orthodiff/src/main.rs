fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(orthodiff::config::LOG_ENV, "info"))
        .format_timestamp(None)
        .init();
    std::process::exit(orthodiff::cli::run(std::env::args_os()));
}
