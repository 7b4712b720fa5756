#![no_main]

use libfuzzer_sys::fuzz_target;

use cdma::attack::compute_metrics_from;
use cdma::records::{parse_outcomes, render_outcomes, rows_to_queries};

fuzz_target!(|data: &[u8]| {
    let Ok(file) = parse_outcomes(data) else {
        return;
    };
    // Parsed rows must aggregate and re-render without panicking, and the
    // rendered form must parse back to the same rows.
    if !file.rows.is_empty() {
        let _ = compute_metrics_from(&rows_to_queries(&file.rows));
    }
    let rendered = render_outcomes(&file.meta, &file.rows);
    let again = parse_outcomes(rendered.as_bytes()).expect("reparse of rendered file");
    assert_eq!(file.rows, again.rows);
});
