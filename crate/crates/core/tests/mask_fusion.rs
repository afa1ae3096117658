mod common;

#[test]
fn acm_identities_and_linearity() {
    println!("{}", common::check_acm_identities(200).unwrap_or_else(|e| panic!("{e}")));
}
