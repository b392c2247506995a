use std::io;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let stdin = io::stdin();
    let mut input = stdin.lock();
    let mut output = io::stdout().lock();
    let code = hred::cli::run(std::env::args_os(), &mut input, &mut output);
    std::process::exit(code);
}
