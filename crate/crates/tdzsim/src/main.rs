fn main() {
    let env_seed = std::env::var("TDZSIM_SEED").ok();
    let code = tdzsim::run(std::env::args_os(), env_seed.as_deref(), &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
