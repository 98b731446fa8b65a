fn main() {
    std::process::exit(fieldcare_gateway::cli::dispatch(std::env::args_os()));
}
