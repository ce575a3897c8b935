fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(sshface_cli::run(&args));
}
