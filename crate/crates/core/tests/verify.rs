use gatera_core::verify::{run_suite, Suite};

#[test]
fn every_suite_passes() {
    for suite in Suite::EACH {
        let report = run_suite(suite, 0).unwrap();
        assert!(!report.rows.is_empty());
        let failures: Vec<_> = report.failures().collect();
        assert!(failures.is_empty(), "{suite}: {failures:?}");
        assert!(report.rows.iter().all(|r| r.suite == suite));
    }
}

#[test]
fn all_concatenates_the_suites() {
    let all = run_suite(Suite::All, 1).unwrap();
    let parts: usize = Suite::EACH
        .iter()
        .map(|&s| run_suite(s, 1).unwrap().rows.len())
        .sum();
    assert_eq!(all.rows.len(), parts);
    assert!(all.passed());
}

#[test]
fn suite_names_parse() {
    for s in ["grad", "theorem", "suppression", "equivalence", "all"] {
        assert_eq!(s.parse::<Suite>().unwrap().to_string(), s);
    }
    assert!("speed".parse::<Suite>().is_err());
}
