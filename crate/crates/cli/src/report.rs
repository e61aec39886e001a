//! Plain-text rendering of test results.

use std::fmt::Write as _;

use apfa_core::inference::TestResult;

fn states(ids: &[apfa_core::StateId]) -> String {
    let s: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
    format!("({})", s.join(","))
}

/// One block per fused group: its node-symbol table, G² and df, then the
/// totals.
pub fn test_table(r: &TestResult) -> String {
    let mut out = String::new();
    let has_strata = r.parts.iter().any(|p| p.stratum.is_some());
    let _ = writeln!(
        out,
        "{:<12}{}{:<24}{:>10}{:>5}",
        "merged",
        if has_strata { format!("{:<10}", "stratum") } else { String::new() },
        "table",
        "G2",
        "df"
    );
    for part in &r.parts {
        let width = part
            .table
            .iter()
            .flatten()
            .map(|n| n.to_string().len())
            .max()
            .unwrap_or(1);
        for (k, row) in part.table.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|n| format!("{n:>width$}")).collect();
            let cells = format!("[ {} ]", cells.join(" "));
            if k == 0 {
                let stratum = match (&part.stratum, has_strata) {
                    (Some(s), _) => format!("{s:<10}"),
                    (None, true) => format!("{:<10}", ""),
                    (None, false) => String::new(),
                };
                let _ = writeln!(
                    out,
                    "{:<12}{}{:<24}{:>10.4}{:>5}",
                    states(&part.states),
                    stratum,
                    cells,
                    part.g2,
                    part.df
                );
            } else {
                let pad = if has_strata { 22 } else { 12 };
                let _ = writeln!(out, "{:pad$}{cells}", "");
            }
        }
    }
    let pad = if has_strata { 46 } else { 36 };
    let _ = writeln!(out, "{:<pad$}{:>10.4}{:>5}", "total", r.g2, r.df_adjusted);
    match r.df_unadjusted {
        Some(d) => {
            let _ = writeln!(out, "unadjusted df {d}");
        }
        None => {
            let _ = writeln!(out, "unadjusted df too large to represent");
        }
    }
    if let Some(p) = r.p_value {
        let _ = writeln!(out, "p-value {p:.4e}");
    }
    for w in &r.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}
