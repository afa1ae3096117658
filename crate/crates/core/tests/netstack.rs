mod common;

#[test]
fn stage_resolutions_double() {
    println!("{}", common::check_resolution_law().unwrap_or_else(|e| panic!("{e}")));
}
