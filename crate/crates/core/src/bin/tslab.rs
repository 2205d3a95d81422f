fn main() {
    println!("tslab: CLI wiring pending");
}
