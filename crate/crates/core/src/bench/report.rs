//! Text renderings of benchmark reports.

use super::BenchReport;

/// Left-aligned text table. The first row is the header and is followed by
/// a dashed rule; trailing spaces are trimmed.
pub fn align_rows<R: AsRef<[String]>>(rows: &[R]) -> String {
    let ncols = rows.iter().map(|r| r.as_ref().len()).max().unwrap_or(0);
    let mut widths = vec![0usize; ncols];
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r.as_ref()) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            s.push_str(cell);
            s.extend(std::iter::repeat_n(' ', widths[i] - cell.chars().count()));
        }
        s.trim_end().to_string()
    };
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        out.push_str(&line(r.as_ref()));
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&line(&rule));
            out.push('\n');
        }
    }
    out
}

fn distinct<'a>(values: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for v in values {
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

fn strings<const N: usize>(cells: [&str; N]) -> Vec<String> {
    cells.iter().map(|s| s.to_string()).collect()
}

/// One line per report with raw counts and accuracy as a fraction.
pub fn render_summary(reports: &[BenchReport]) -> String {
    let mut rows = vec![strings([
        "Dataset", "Variant", "Docs", "Items", "Correct", "Unparsed", "Errored", "Accuracy",
    ])];
    for r in reports {
        rows.push(vec![
            r.dataset.clone(),
            r.variant.clone(),
            r.retrieve_n.to_string(),
            r.n_items.to_string(),
            r.correct.to_string(),
            r.unparsed.to_string(),
            r.errored.to_string(),
            format!("{:.3}", r.accuracy),
        ]);
    }
    align_rows(&rows)
}

/// Variants as rows, datasets as columns, percent accuracy with two
/// decimals and a trailing average over the datasets present in the row.
pub fn render_accuracy_table(reports: &[BenchReport]) -> String {
    let datasets = distinct(reports.iter().map(|r| r.dataset.as_str()));
    let variants = distinct(reports.iter().map(|r| r.variant.as_str()));
    let mut header = vec!["Experiment".to_string()];
    header.extend(datasets.iter().map(|d| d.to_string()));
    header.push("Average".into());
    let mut rows = vec![header];
    for v in &variants {
        let mut row = vec![v.to_string()];
        let mut sum = 0.0;
        let mut n = 0;
        for d in &datasets {
            match reports.iter().find(|r| r.variant == *v && r.dataset == *d) {
                Some(r) => {
                    sum += r.accuracy * 100.0;
                    n += 1;
                    row.push(format!("{:.2}", r.accuracy * 100.0));
                }
                None => row.push("-".into()),
            }
        }
        row.push(if n == 0 { "-".into() } else { format!("{:.2}", sum / n as f64) });
        rows.push(row);
    }
    align_rows(&rows)
}

/// Gate counts and mean sub-questions per benchmark.
pub fn render_gate_table(reports: &[BenchReport]) -> String {
    let several = distinct(reports.iter().map(|r| r.variant.as_str())).len() > 1;
    let mut rows = vec![strings(["Benchmark", "Know", "Unknow", "Average Subproblems"])];
    for r in reports {
        let name = if several {
            format!("{} ({})", r.dataset, r.variant)
        } else {
            r.dataset.clone()
        };
        rows.push(vec![
            name,
            r.gate.know.to_string(),
            r.gate.unknow.to_string(),
            r.mean_subquestions.map_or("-".into(), |m| format!("{m:.2}")),
        ]);
    }
    align_rows(&rows)
}

/// Retrieved-document count as rows, datasets as columns.
pub fn render_sweep(reports: &[BenchReport]) -> String {
    let datasets = distinct(reports.iter().map(|r| r.dataset.as_str()));
    let mut ns: Vec<usize> = reports.iter().map(|r| r.retrieve_n).collect();
    ns.sort_unstable();
    ns.dedup();
    let mut header = vec!["Documents".to_string()];
    header.extend(datasets.iter().map(|d| d.to_string()));
    let mut rows = vec![header];
    for n in ns {
        let mut row = vec![n.to_string()];
        for d in &datasets {
            row.push(
                reports
                    .iter()
                    .find(|r| r.retrieve_n == n && r.dataset == *d)
                    .map_or("-".into(), |r| format!("{:.2}", r.accuracy * 100.0)),
            );
        }
        rows.push(row);
    }
    align_rows(&rows)
}
