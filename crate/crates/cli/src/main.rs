fn main() {
    eprintln!("pfcrack: not wired up yet");
    std::process::exit(2);
}
