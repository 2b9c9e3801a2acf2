fn main() {
    std::process::exit(tactile_pose::cli::run(std::env::args_os()));
}
