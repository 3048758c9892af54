fn main() {
    std::process::exit(condaformer::cli::run(std::env::args_os()));
}
