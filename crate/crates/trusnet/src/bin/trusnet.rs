fn main() {
    eprintln!("cli not wired yet");
}
