fn main() {
    let outcome = drlab::cli::run(std::env::args_os());
    std::process::exit(drlab::cli::finish(outcome));
}
