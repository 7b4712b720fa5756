//! The checked-in fuzz corpus seeds must stay parseable: each seed is a
//! known-good input for its fuzz target's entry point.

use std::path::PathBuf;

fn corpus(target: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target)
}

#[test]
fn container_seeds_parse() {
    let dir = corpus("fuzz_container");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).expect("corpus dir") {
        let path = entry.unwrap().path();
        let bytes = std::fs::read(&path).unwrap();
        let c = cdma::container::Container::from_bytes(&bytes)
            .unwrap_or_else(|e| panic!("{} failed to parse: {e}", path.display()));
        // Round-trip stays byte-identical.
        assert_eq!(c.to_bytes(), bytes, "{} round-trip", path.display());
        match c.role.as_str() {
            "dataset" => {
                cdma::container::dataset_from_container(&c).unwrap();
            }
            "pairs" => {
                cdma::container::pairs_from_container(&c).unwrap();
            }
            "classifier" => {
                cdma::container::classifier_from_container(&c).unwrap();
            }
            "denoiser" => {
                cdma::container::denoiser_from_container(&c).unwrap();
            }
            "ae-bundle" => {}
            other => panic!("unexpected role {other}"),
        }
        seen += 1;
    }
    assert!(seen >= 4, "expected at least 4 container seeds, found {seen}");
}

#[test]
fn outcomes_seed_parses() {
    let bytes = std::fs::read(corpus("fuzz_outcomes_csv").join("outcomes.csv")).unwrap();
    let file = cdma::records::parse_outcomes(&bytes).unwrap();
    assert_eq!(file.rows.len(), 3);
    assert_eq!(file.meta.get("victim").map(String::as_str), Some("victim-b"));
}

#[test]
fn run_config_seed_parses() {
    let text = std::fs::read_to_string(corpus("fuzz_run_config").join("example.json")).unwrap();
    let cfg = cdma::runconfig::RunConfig::from_json(&text).unwrap();
    cfg.validate().unwrap();
}
