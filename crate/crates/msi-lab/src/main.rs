fn main() {
    println!("msi-lab");
}
