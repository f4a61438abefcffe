fn main() {
    std::process::exit(bvqa_cli::run(std::env::args_os()));
}
