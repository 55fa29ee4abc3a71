fn main() {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let code = heurvid::cli::dispatch(&args, &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
