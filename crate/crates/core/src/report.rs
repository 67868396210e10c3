//! Side-by-side comparison of trained objectives in the layout of a retrieval
//! results table, with localization scores and relative R@1 columns.
//!
//! One row per `(label, direction)` in input order, then a `random` row per
//! direction when a baseline is supplied. Columns are tab separated:
//!
//! ```text
//! loss  direction  n  r@1  r@5  r@10  r@50  mean_rank  median_rank  pointing_accuracy  mass_inside  rel_r@1
//! ```
//!
//! Recalls are percentages with two decimals, ranks have one decimal, and the
//! localization scores have four. `rel_r@1` is the percent change of R@1
//! against the reference row of the same direction, with one decimal; the
//! reference row itself and rows without a usable reference carry `-`.

use crate::error::{Error, Result};
use crate::retrieval::{relative_improvement, Direction, RandomBaseline, RetrievalReport};

pub const COMPARISON_HEADER: &str =
    "loss\tdirection\tn\tr@1\tr@5\tr@10\tr@50\tmean_rank\tmedian_rank\tpointing_accuracy\tmass_inside\trel_r@1";

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    /// Audio-to-visual first, then visual-to-audio.
    pub reports: Vec<RetrievalReport>,
    pub pointing_accuracy: Option<f64>,
    pub mass_inside: Option<f64>,
}

fn report_for(row: &ComparisonRow, d: Direction) -> Option<&RetrievalReport> {
    row.reports.iter().find(|r| r.direction == d)
}

fn recall_cells(r: &RetrievalReport) -> String {
    r.recall_at.iter().map(|(_, v)| format!("{v:.2}")).collect::<Vec<_>>().join("\t")
}

fn opt4(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Percent change of A→V R@1 of `label` over `reference`.
pub fn relative_r1(rows: &[ComparisonRow], label: &str, reference: &str, d: Direction) -> Result<f64> {
    let find = |l: &str| {
        rows.iter()
            .find(|r| r.label == l)
            .and_then(|r| report_for(r, d))
            .and_then(|r| r.recall(1))
            .ok_or_else(|| Error::InvalidArgument(format!("no {d} R@1 for `{l}`")))
    };
    relative_improvement(find(label)?, find(reference)?)
}

/// Renders the table. `reference` names the row the relative column is measured against.
pub fn comparison_table(rows: &[ComparisonRow], reference: &str, random: Option<&[RandomBaseline]>) -> Result<String> {
    if !rows.iter().any(|r| r.label == reference) {
        return Err(Error::InvalidArgument(format!("reference row `{reference}` is missing")));
    }
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for row in rows {
        for d in Direction::BOTH {
            let Some(r) = report_for(row, d) else { continue };
            let rel = if row.label == reference {
                "-".to_string()
            } else {
                relative_r1(rows, &row.label, reference, d).map_or_else(|_| "-".to_string(), |v| format!("{v:.1}"))
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.1}\t{:.1}\t{}\t{}\t{}\n",
                row.label,
                d,
                r.n,
                recall_cells(r),
                r.mean_rank,
                r.median_rank,
                opt4(row.pointing_accuracy),
                opt4(row.mass_inside),
                rel
            ));
        }
    }
    for b in random.unwrap_or_default() {
        let r = &b.report;
        out.push_str(&format!(
            "random\t{}\t{}\t{}\t{:.1}\t{:.1}\t-\t-\t-\n",
            r.direction,
            r.n,
            recall_cells(r),
            r.mean_rank,
            r.median_rank
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(label: &str, r1: f64) -> ComparisonRow {
        ComparisonRow {
            label: label.into(),
            reports: vec![RetrievalReport {
                direction: Direction::AudioToVisual,
                recall_at: vec![(1, r1), (5, 20.0), (10, 30.0), (50, 50.0)],
                mean_rank: 266.0,
                median_rank: 35.0,
                n: 5000,
            }],
            pointing_accuracy: Some(0.5),
            mass_inside: None,
        }
    }

    #[test]
    fn published_values_give_59_2_percent() {
        let rows = vec![fixture("dense", 9.90), fixture("global", 6.22)];
        let v = relative_r1(&rows, "dense", "global", Direction::AudioToVisual).unwrap();
        assert!((v - 59.2).abs() <= 0.05, "{v}");
        let table = comparison_table(&rows, "global", None).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], COMPARISON_HEADER);
        assert_eq!(
            lines[1],
            "dense\ta2v\t5000\t9.90\t20.00\t30.00\t50.00\t266.0\t35.0\t0.5000\t-\t59.2"
        );
        assert!(lines[2].ends_with("\t-"));
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn missing_reference_is_rejected() {
        assert!(comparison_table(&[fixture("dense", 1.0)], "global", None).is_err());
    }
}
