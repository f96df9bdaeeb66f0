use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EPLOOP_LOG", "warn")).init();
    ExitCode::from(eploop::cli::run() as u8)
}
