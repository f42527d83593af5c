fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let stdin = std::io::stdin();
    let mut input = stdin.lock();
    let mut out = std::io::stdout().lock();
    let code = refqual_cli::run(std::env::args_os(), &mut input, &mut out);
    std::process::exit(code);
}
