fn main() {
    std::process::exit(pipetune::cli::run(std::env::args_os()));
}
