use nadpex::gradcheck::{registry, run_all, run_selected, uncovered_estimators, CSV_HEADER, reports_csv};

#[test]
fn every_oracle_check_passes() {
    let reports = run_all().unwrap();
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{} rel {:e} abs {:e} {}", r.name, r.rel_err, r.abs_err, r.note))
        .collect();
    assert!(failed.is_empty(), "{failed:#?}");
    let csv = reports_csv(&reports);
    assert!(csv.starts_with(CSV_HEADER));
    assert_eq!(csv.lines().count(), reports.len() + 1);
}

#[test]
fn registry_is_complete_and_selectable() {
    assert!(uncovered_estimators().is_empty());
    let names: Vec<&str> = registry().iter().map(|c| c.name).collect();
    let mut sorted = names.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    assert!(run_selected(&["no_such_check"]).is_err());
    assert!(!run_selected(&["gae_direct_sum"]).unwrap().is_empty());
}
