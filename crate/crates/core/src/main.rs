fn main() {
    let code = clusterprobe::cli::run(std::env::args_os());
    std::process::exit(code);
}
