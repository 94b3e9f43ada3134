fn main() {
    std::process::exit(swarm_nav::cli::main_with(std::env::args_os()));
}
