fn main() {
    // real CLI arrives with the harness module
}
