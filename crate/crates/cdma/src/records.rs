//! CSV record files for attack outcomes and defense evaluations.
//!
//! Schema `outcomes-v1`:
//!
//! ```text
//! # schema=outcomes-v1
//! # config_hash=<hex>  # seed=<n>  # victim=<id>  ... (one key per line)
//! input_id,mode,epsilon,success,queries,victim_label
//! ```
//!
//! Metadata lines start with `#` and hold `key=value` pairs; the column row
//! and the value rows follow. Readers treat input as untrusted and fail with
//! positioned errors instead of panicking.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::attack::{AttackQueries, AttackRecord};
use crate::error::RecordError;

pub const OUTCOMES_SCHEMA: &str = "outcomes-v1";
pub const DEFENSE_SCHEMA: &str = "defense-summary-v1";

const OUTCOMES_COLUMNS: &str = "input_id,mode,epsilon,success,queries,victim_label";
const DEFENSE_COLUMNS: &str = "defense,clean_accuracy,robust_asr,kept_aes";

/// One row of an outcomes file.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeRow {
    pub input_id: usize,
    pub mode: String,
    pub epsilon: f32,
    pub success: bool,
    pub queries: u32,
    /// Victim label on success; empty field otherwise.
    pub victim_label: Option<usize>,
}

/// Metadata map from the `#` header lines.
pub type MetaMap = BTreeMap<String, String>;

/// A parsed outcomes file.
#[derive(Debug, Clone)]
pub struct OutcomesFile {
    pub meta: MetaMap,
    pub rows: Vec<OutcomeRow>,
}

pub fn rows_from_records(
    records: &[AttackRecord],
    mode: &str,
    epsilon: f32,
) -> Vec<OutcomeRow> {
    records
        .iter()
        .map(|r| OutcomeRow {
            input_id: r.input_id,
            mode: mode.to_string(),
            epsilon,
            success: r.outcome.success,
            queries: r.outcome.queries_used,
            victim_label: r.outcome.victim_label,
        })
        .collect()
}

/// Render an outcomes file to a string (stable formatting, byte-reproducible).
pub fn render_outcomes(meta: &MetaMap, rows: &[OutcomeRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!("# schema={OUTCOMES_SCHEMA}\n"));
    for (k, v) in meta {
        out.push_str(&format!("# {k}={v}\n"));
    }
    out.push_str(OUTCOMES_COLUMNS);
    out.push('\n');
    for r in rows {
        let label = r
            .victim_label
            .map(|l| l.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{label}\n",
            r.input_id, r.mode, r.epsilon, r.success, r.queries
        ));
    }
    out
}

pub fn write_outcomes(path: &Path, meta: &MetaMap, rows: &[OutcomeRow]) -> Result<(), RecordError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, render_outcomes(meta, rows))?;
    Ok(())
}

/// Parse an outcomes file from untrusted bytes.
pub fn parse_outcomes(bytes: &[u8]) -> Result<OutcomesFile, RecordError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| RecordError::Malformed("not valid UTF-8".into()))?;
    let mut meta = MetaMap::new();
    let mut rows = Vec::new();
    let mut saw_columns = false;
    let mut schema_seen = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        if let Some(stripped) = line.strip_prefix('#') {
            let kv = stripped.trim();
            if let Some((k, v)) = kv.split_once('=') {
                if k.trim() == "schema" {
                    schema_seen = true;
                    if v.trim() != OUTCOMES_SCHEMA {
                        return Err(RecordError::BadSchema(v.trim().to_string()));
                    }
                }
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        if !saw_columns {
            if line != OUTCOMES_COLUMNS {
                return Err(RecordError::Malformed(format!(
                    "unexpected column row `{line}`"
                )));
            }
            saw_columns = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(RecordError::BadRow {
                line: lineno + 1,
                detail: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let bad = |what: &str| RecordError::BadRow {
            line: lineno + 1,
            detail: what.to_string(),
        };
        let row = OutcomeRow {
            input_id: fields[0].parse().map_err(|_| bad("bad input_id"))?,
            mode: match fields[1] {
                "untargeted" | "targeted" => fields[1].to_string(),
                _ => return Err(bad("bad mode")),
            },
            epsilon: {
                let e: f32 = fields[2].parse().map_err(|_| bad("bad epsilon"))?;
                if !(e.is_finite() && e > 0.0 && e <= 1.0) {
                    return Err(bad("epsilon out of range"));
                }
                e
            },
            success: fields[3].parse().map_err(|_| bad("bad success flag"))?,
            queries: fields[4].parse().map_err(|_| bad("bad query count"))?,
            victim_label: if fields[5].is_empty() {
                None
            } else {
                Some(fields[5].parse().map_err(|_| bad("bad victim label"))?)
            },
        };
        rows.push(row);
    }
    if !schema_seen || !saw_columns {
        return Err(RecordError::Malformed(
            "missing schema line or column row".into(),
        ));
    }
    Ok(OutcomesFile { meta, rows })
}

pub fn read_outcomes(path: &Path) -> Result<OutcomesFile, RecordError> {
    parse_outcomes(&fs::read(path)?)
}

/// Convert parsed rows back into metric inputs.
pub fn rows_to_queries(rows: &[OutcomeRow]) -> Vec<AttackQueries> {
    rows.iter()
        .map(|r| AttackQueries {
            success: r.success,
            queries: r.queries,
        })
        .collect()
}

/// One row of a defense summary file.
#[derive(Debug, Clone, PartialEq)]
pub struct DefenseRow {
    pub defense: String,
    /// Victim accuracy on clean holdout images routed through the defense.
    pub clean_accuracy: f64,
    /// Fraction (percent) of stored AEs still adversarial under the defense.
    pub robust_asr: f64,
    /// Number of AEs evaluated.
    pub kept_aes: usize,
}

pub fn render_defense_summary(meta: &MetaMap, rows: &[DefenseRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!("# schema={DEFENSE_SCHEMA}\n"));
    for (k, v) in meta {
        out.push_str(&format!("# {k}={v}\n"));
    }
    out.push_str(DEFENSE_COLUMNS);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.4},{:.4},{}\n",
            r.defense, r.clean_accuracy, r.robust_asr, r.kept_aes
        ));
    }
    out
}

pub fn write_defense_summary(
    path: &Path,
    meta: &MetaMap,
    rows: &[DefenseRow],
) -> Result<(), RecordError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, render_defense_summary(meta, rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rows() -> Vec<OutcomeRow> {
        vec![
            OutcomeRow {
                input_id: 3,
                mode: "untargeted".into(),
                epsilon: 16.0 / 255.0,
                success: true,
                queries: 1,
                victim_label: Some(2),
            },
            OutcomeRow {
                input_id: 9,
                mode: "untargeted".into(),
                epsilon: 16.0 / 255.0,
                success: false,
                queries: 50,
                victim_label: None,
            },
        ]
    }

    #[test]
    fn outcomes_roundtrip() {
        let mut meta = MetaMap::new();
        meta.insert("victim".into(), "victim-b".into());
        meta.insert("seed".into(), "7".into());
        let text = render_outcomes(&meta, &sample_rows());
        let parsed = parse_outcomes(text.as_bytes()).unwrap();
        assert_eq!(parsed.rows, sample_rows());
        assert_eq!(parsed.meta.get("victim").unwrap(), "victim-b");
        // Render is stable.
        assert_eq!(render_outcomes(&meta, &parsed.rows), text);
    }

    #[test]
    fn parser_rejects_garbage_without_panicking() {
        assert!(parse_outcomes(b"\x00\xff\xfe").is_err());
        assert!(parse_outcomes(b"").is_err());
        assert!(parse_outcomes(b"# schema=outcomes-v1\nwrong,columns\n").is_err());
        assert!(parse_outcomes(b"# schema=other-v9\n").is_err());
        let text = "# schema=outcomes-v1\ninput_id,mode,epsilon,success,queries,victim_label\n1,untargeted,2.0,true,1,0\n";
        assert!(parse_outcomes(text.as_bytes()).is_err(), "epsilon out of range");
        let text = "# schema=outcomes-v1\ninput_id,mode,epsilon,success,queries,victim_label\nx,untargeted,0.05,true,1,0\n";
        match parse_outcomes(text.as_bytes()) {
            Err(RecordError::BadRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected BadRow, got {other:?}"),
        }
    }

    #[test]
    fn defense_summary_renders() {
        let rows = vec![DefenseRow {
            defense: "bdr-3".into(),
            clean_accuracy: 0.9219,
            robust_asr: 64.0625,
            kept_aes: 64,
        }];
        let text = render_defense_summary(&MetaMap::new(), &rows);
        assert!(text.contains("bdr-3,0.9219,64.0625,64"));
    }
}
