use env_logger::Env;

fn main() {
    env_logger::Builder::from_env(Env::default().filter_or("FMTC_LOG", "warn")).init();
    std::process::exit(fmtc_core::cli::cli_main(std::env::args_os()));
}
