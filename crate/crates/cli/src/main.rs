fn main() {
    println!("{:?}", spectool_core::probe());
}
