//! Aggregate tables over outcome files.
//!
//! The main table mirrors the per-victim/per-mode layout of the evaluation:
//! ASR / Avg.Q / Med.Q per victim and mode, with every attacked epsilon shown
//! side by side. Ablation, transfer, model-independent and defense results
//! render as their own sections. Aggregation refuses to mix rows from
//! incompatible runs (different config hash for the same cell, or mixed
//! epsilon/mode inside one file).

use std::collections::BTreeMap;

use crate::attack::compute_metrics_from;
use crate::error::ReportError;
use crate::records::{rows_to_queries, DefenseRow, MetaMap, OutcomesFile};

/// One outcomes file plus the key metadata the report needs.
#[derive(Debug, Clone)]
pub struct RunEntry {
    pub meta: MetaMap,
    pub file: OutcomesFile,
}

fn meta_get<'a>(meta: &'a MetaMap, key: &str) -> Result<&'a str, ReportError> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| ReportError::Mismatched(format!("missing `{key}` metadata")))
}

/// Check one file for internal consistency (single mode/epsilon).
fn check_file(entry: &RunEntry) -> Result<(), ReportError> {
    let mode = meta_get(&entry.file.meta, "mode")?;
    let eps = meta_get(&entry.file.meta, "epsilon")?;
    for row in &entry.file.rows {
        if row.mode != mode {
            return Err(ReportError::Mismatched(format!(
                "row mode `{}` differs from file mode `{mode}`",
                row.mode
            )));
        }
        let row_eps = format!("{}", row.epsilon);
        if row_eps != eps {
            return Err(ReportError::Mismatched(format!(
                "row epsilon {row_eps} differs from file epsilon {eps}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Default)]
pub struct Report {
    /// (victim, mode) -> epsilon display -> (metrics line, config hash)
    main: BTreeMap<(String, String), BTreeMap<String, (String, String)>>,
    ablation: Vec<(String, String, String, String)>, // schedule, steps, victim, metrics
    independent: Vec<(String, String, String, String)>, // run kind, victim, dataset, metrics
    transfer: Vec<String>,
    defenses: Vec<(String, Vec<DefenseRow>)>,
    header_lines: Vec<String>,
}

impl Report {
    pub fn new() -> Self {
        Report::default()
    }

    pub fn push_header(&mut self, line: impl Into<String>) {
        self.header_lines.push(line.into());
    }

    /// Add an outcomes file; `run` metadata decides which section it feeds.
    pub fn add_outcomes(&mut self, file: OutcomesFile) -> Result<(), ReportError> {
        if file.rows.is_empty() {
            return Err(ReportError::Empty);
        }
        let entry = RunEntry {
            meta: file.meta.clone(),
            file,
        };
        check_file(&entry)?;
        let meta = &entry.file.meta;
        let victim = meta_get(meta, "victim")?.to_string();
        let mode = meta_get(meta, "mode")?.to_string();
        let eps = meta_get(meta, "epsilon")?.to_string();
        let hash = meta_get(meta, "config_hash")?.to_string();
        let run = meta.get("run").map(String::as_str).unwrap_or("attack");
        let metrics = compute_metrics_from(&rows_to_queries(&entry.file.rows))
            .map_err(|e| ReportError::Mismatched(e.to_string()))?;
        let line = format!(
            "ASR {:6.2}%  Avg.Q {:>7}  Med.Q {:>4}  ({}/{})",
            metrics.asr,
            metrics.format_avg(),
            metrics.format_median(),
            metrics.successes,
            metrics.attempts
        );
        match run {
            "ablation" => {
                let sched = meta_get(meta, "schedule")?.to_string();
                let steps = meta_get(meta, "steps")?.to_string();
                self.ablation.push((sched, steps, victim, line));
            }
            "model-independent" | "data-independent" => {
                let dataset = meta.get("dataset").cloned().unwrap_or_default();
                self.independent.push((run.to_string(), victim, dataset, line));
            }
            _ => {
                let per_eps = self.main.entry((victim, mode)).or_default();
                if let Some((_, existing_hash)) = per_eps.get(&eps) {
                    if existing_hash != &hash {
                        return Err(ReportError::Mismatched(format!(
                            "two runs for the same victim/mode/epsilon with different config hashes ({existing_hash} vs {hash})"
                        )));
                    }
                }
                per_eps.insert(eps, (line, hash));
            }
        }
        Ok(())
    }

    pub fn add_transfer_line(&mut self, line: impl Into<String>) {
        self.transfer.push(line.into());
    }

    pub fn add_defense_rows(&mut self, victim: &str, rows: Vec<DefenseRow>) {
        self.defenses.push((victim.to_string(), rows));
    }

    pub fn is_empty(&self) -> bool {
        self.main.is_empty()
            && self.ablation.is_empty()
            && self.independent.is_empty()
            && self.transfer.is_empty()
            && self.defenses.is_empty()
    }

    /// Render the whole report as plain text.
    pub fn render(&self) -> Result<String, ReportError> {
        if self.is_empty() {
            return Err(ReportError::Empty);
        }
        let mut out = String::new();
        out.push_str("==== attack report ====\n");
        for line in &self.header_lines {
            out.push_str(line);
            out.push('\n');
        }
        out.push_str(
            "conventions: ASR over all attempts; Avg.Q and Med.Q over successful attempts only (lower median)\n",
        );

        if !self.main.is_empty() {
            out.push_str("\n-- attack success rate and query counts --\n");
            for ((victim, mode), per_eps) in &self.main {
                out.push_str(&format!("{victim} [{mode}]\n"));
                for (eps, (line, _)) in per_eps {
                    out.push_str(&format!("  eps {eps:<12} {line}\n"));
                }
            }
        }

        if !self.ablation.is_empty() {
            out.push_str("\n-- sampling schedule/steps ablation --\n");
            for (sched, steps, victim, line) in &self.ablation {
                out.push_str(&format!(
                    "  {victim}: schedule {sched:<7} S={steps:<5} {line}\n"
                ));
            }
        }

        if !self.independent.is_empty() {
            out.push_str("\n-- data-/model-independent runs --\n");
            for (kind, victim, dataset, line) in &self.independent {
                out.push_str(&format!(
                    "  {kind:<18} {victim:<12} dataset {dataset:<8} {line}\n"
                ));
            }
        }

        if !self.transfer.is_empty() {
            out.push_str("\n-- transfer of stored AEs --\n");
            for line in &self.transfer {
                out.push_str(&format!("  {line}\n"));
            }
        }

        if !self.defenses.is_empty() {
            out.push_str("\n-- robustness under input-transformation defenses --\n");
            for (victim, rows) in &self.defenses {
                out.push_str(&format!("{victim}\n"));
                for r in rows {
                    out.push_str(&format!(
                        "  {:<12} clean acc {:6.2}%  robust ASR {:6.2}%  ({} AEs)\n",
                        r.defense,
                        r.clean_accuracy * 100.0,
                        r.robust_asr,
                        r.kept_aes
                    ));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::{parse_outcomes, render_outcomes, MetaMap, OutcomeRow};

    fn file_with(victim: &str, eps: f32, hash: &str, run: Option<&str>) -> OutcomesFile {
        let mut meta = MetaMap::new();
        meta.insert("victim".into(), victim.into());
        meta.insert("mode".into(), "untargeted".into());
        meta.insert("epsilon".into(), format!("{eps}"));
        meta.insert("config_hash".into(), hash.into());
        if let Some(r) = run {
            meta.insert("run".into(), r.into());
            meta.insert("schedule".into(), "linear".into());
            meta.insert("steps".into(), "50".into());
        }
        let rows = vec![
            OutcomeRow {
                input_id: 0,
                mode: "untargeted".into(),
                epsilon: eps,
                success: true,
                queries: 1,
                victim_label: Some(1),
            },
            OutcomeRow {
                input_id: 1,
                mode: "untargeted".into(),
                epsilon: eps,
                success: false,
                queries: 10,
                victim_label: None,
            },
        ];
        parse_outcomes(render_outcomes(&meta, &rows).as_bytes()).unwrap()
    }

    #[test]
    fn epsilons_render_side_by_side() {
        let mut report = Report::new();
        report.add_outcomes(file_with("victim-b", 16.0 / 255.0, "h1", None)).unwrap();
        report.add_outcomes(file_with("victim-b", 8.0 / 255.0, "h1", None)).unwrap();
        let text = report.render().unwrap();
        let eps16 = format!("{}", 16.0f32 / 255.0);
        let eps8 = format!("{}", 8.0f32 / 255.0);
        assert!(text.contains(&eps16), "{text}");
        assert!(text.contains(&eps8), "{text}");
        assert!(text.contains("victim-b [untargeted]"));
    }

    #[test]
    fn mismatched_hashes_are_refused() {
        let mut report = Report::new();
        report.add_outcomes(file_with("victim-b", 0.05, "h1", None)).unwrap();
        let err = report
            .add_outcomes(file_with("victim-b", 0.05, "h2", None))
            .unwrap_err();
        assert!(matches!(err, ReportError::Mismatched(_)));
    }

    #[test]
    fn empty_report_is_an_error() {
        let report = Report::new();
        assert!(matches!(report.render(), Err(ReportError::Empty)));
    }

    #[test]
    fn ablation_rows_go_to_their_section() {
        let mut report = Report::new();
        report
            .add_outcomes(file_with("victim-b", 0.05, "h1", Some("ablation")))
            .unwrap();
        let text = report.render().unwrap();
        assert!(text.contains("ablation"));
        assert!(text.contains("schedule linear"));
    }
}
