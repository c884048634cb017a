//! Greedy target matching against exhaustive assignment.

mod common;

#[test]
fn greedy_agrees_with_exhaustive_matching() {
    let (gaps, n) = common::matcher_campaign(2000, 5150).unwrap();
    let rate = gaps as f64 / n as f64;
    println!("greedy gap cases: {gaps} of {n} ({rate:.4})");
    assert!(rate < 0.01, "gap rate {rate}");
}
