fn main() {
    println!("moeptq");
}
