mod common;

use common::records::{failure, fit_record};
use common::{fixture, small};
use elicit_core::engine::Elicit;
use elicit_core::persist::{load, save, SavedBundle, FORMAT_VERSION};
use elicit_core::{Error, Registry};
use proptest::collection::vec;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn randomized_records_survive_save_and_load(
        records in vec(fit_record(), 1..3),
        failures in vec(failure(), 0..2),
    ) {
        let e = Elicit { config: fixture("case1.json"), records, failures };
        let text = SavedBundle::from_elicit(&e).unwrap().to_json().unwrap();
        let back = SavedBundle::from_json(&text, "memory").unwrap().into_elicit();
        prop_assert_eq!(back, e);
    }
}

#[test]
fn fitted_bundle_round_trips_through_a_file() {
    let reg = Registry::default();
    let mut e = Elicit::new(small("case2.json", 2));
    e.fit(2, &reg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bundle.json");
    save(&e, &path).unwrap();
    assert_eq!(load(&path).unwrap(), e);
}

#[test]
fn other_format_versions_are_refused() {
    let e = Elicit::new(fixture("case1.json"));
    let text = SavedBundle::from_elicit(&e).unwrap().to_json().unwrap();
    let mut raw: serde_json::Value = serde_json::from_str(&text).unwrap();
    raw["format_version"] = (FORMAT_VERSION + 1).into();
    let err = SavedBundle::from_json(&raw.to_string(), "memory").unwrap_err();
    assert!(matches!(err, Error::FormatVersion { found, .. } if found == FORMAT_VERSION + 1), "{err}");
    assert!(err.to_string().contains("not supported"));
}

#[test]
fn tampered_content_fails_the_checksum() {
    let e = Elicit::new(fixture("case1.json"));
    let text = SavedBundle::from_elicit(&e).unwrap().to_json().unwrap();
    let mut raw: serde_json::Value = serde_json::from_str(&text).unwrap();
    raw["config"]["trainer"]["epochs"] = 601.into();
    let err = SavedBundle::from_json(&raw.to_string(), "memory").unwrap_err();
    assert!(matches!(err, Error::Checksum { .. }), "{err}");
}
