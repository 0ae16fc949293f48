//! Aggregated result tables: mean ± std over seeds, pivoted method × sparsity.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::RunResult;
use crate::error::{Error, Result};
use crate::prune::PruneMethod;

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub method: PruneMethod,
    pub target_sparsity: f64,
    pub runs: usize,
    pub failed: usize,
    pub collapsed: usize,
    pub mean: f64,
    pub std: f64,
    pub best: bool,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One cell per (method, sparsity), with the best early-pruning method of
/// each sparsity column flagged. Collapsed cells are never flagged.
pub fn cells(results: &[RunResult]) -> Result<Vec<Cell>> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    let mut groups: BTreeMap<(PruneMethod, u64), Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        groups
            .entry((r.method, r.target_sparsity.to_bits()))
            .or_default()
            .push(r);
    }
    let mut cells: Vec<Cell> = groups
        .into_iter()
        .map(|((method, kappa), runs)| {
            let acc: Vec<f64> = runs
                .iter()
                .filter(|r| !r.failed())
                .map(|r| r.test_accuracy)
                .collect();
            let (mean, std) = mean_std(&acc);
            Cell {
                method,
                target_sparsity: f64::from_bits(kappa),
                runs: runs.len(),
                failed: runs.iter().filter(|r| r.failed()).count(),
                collapsed: runs.iter().filter(|r| r.collapsed()).count(),
                mean,
                std,
                best: false,
            }
        })
        .collect();
    let mut columns: Vec<u64> = cells.iter().map(|c| c.target_sparsity.to_bits()).collect();
    columns.sort_unstable();
    columns.dedup();
    for col in columns {
        let best = cells
            .iter()
            .filter(|c| {
                c.target_sparsity.to_bits() == col
                    && c.method.is_early()
                    && c.collapsed == 0
                    && !c.mean.is_nan()
            })
            .map(|c| c.mean)
            .fold(f64::NEG_INFINITY, f64::max);
        for c in cells.iter_mut() {
            if c.target_sparsity.to_bits() == col
                && c.method.is_early()
                && c.collapsed == 0
                && c.mean == best
            {
                c.best = true;
            }
        }
    }
    Ok(cells)
}

fn cell_text(c: &Cell) -> String {
    let mut s = if c.mean.is_nan() {
        "failed".to_string()
    } else {
        format!("{:.2} ± {:.2}", 100.0 * c.mean, 100.0 * c.std)
    };
    if c.best {
        s.push_str(" *");
    }
    if c.collapsed > 0 {
        let _ = write!(s, " collapse({}/{})", c.collapsed, c.runs);
    }
    s
}

/// Plain-text pivot: rows are methods, columns are target sparsities,
/// cells are test accuracy (%) mean ± std over seeds.
pub fn pivot_table(results: &[RunResult]) -> Result<String> {
    let cells = cells(results)?;
    let mut methods: Vec<PruneMethod> = cells.iter().map(|c| c.method).collect();
    methods.dedup();
    let mut columns: Vec<f64> = cells.iter().map(|c| c.target_sparsity).collect();
    columns.sort_by(f64::total_cmp);
    columns.dedup();

    let header: Vec<String> = std::iter::once("method".to_string())
        .chain(columns.iter().map(|k| format!("{:.2}%", 100.0 * k)))
        .collect();
    let rows: Vec<Vec<String>> = methods
        .iter()
        .map(|&m| {
            std::iter::once(m.name().to_string())
                .chain(columns.iter().map(|k| {
                    cells
                        .iter()
                        .find(|c| c.method == m && c.target_sparsity == *k)
                        .map_or_else(|| "-".to_string(), cell_text)
                }))
                .collect()
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            rows.iter()
                .map(|r| r[i].chars().count())
                .chain(std::iter::once(header[i].chars().count()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cols: &[String]| -> String {
        cols.iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let mut out = String::new();
    out.push_str(&line(&header));
    out.push('\n');
    out.push_str(
        &widths
            .iter()
            .map(|&w| "-".repeat(w))
            .collect::<Vec<_>>()
            .join("-+-"),
    );
    out.push('\n');
    for r in &rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out.push_str("\nTest accuracy (%), mean ± sample std over seeds.\n");
    out.push_str("* highest accuracy among early-pruning methods in the column.\n");
    out.push_str("collapse(k/n): k of n runs lost a whole layer and are untrainable.\n");
    Ok(out)
}

/// Writes the pivot to `out` and a per-cell summary CSV next to it
/// (`out` with a `.csv` extension). Returns the pivot text.
pub fn report(results: &[RunResult], out: &Path) -> Result<String> {
    let pivot = pivot_table(results)?;
    let cells = cells(results)?;
    std::fs::write(out, &pivot).map_err(|e| Error::io(out, e))?;
    let csv_path = out.with_extension("csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record([
        "method",
        "target_sparsity",
        "runs",
        "mean_accuracy",
        "std_accuracy",
        "best_early",
        "collapsed_runs",
        "failed_runs",
    ])?;
    for c in &cells {
        w.write_record([
            c.method.name().to_string(),
            c.target_sparsity.to_string(),
            c.runs.to_string(),
            c.mean.to_string(),
            c.std.to_string(),
            c.best.to_string(),
            c.collapsed.to_string(),
            c.failed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(pivot)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: PruneMethod, kappa: f64, seed: u64, acc: f64, collapsed: &str) -> RunResult {
        RunResult {
            method,
            model: "m".into(),
            dataset: "d".into(),
            target_sparsity: kappa,
            achieved_sparsity: kappa,
            seed,
            pretrain_epochs: 0,
            train_epochs: 1,
            test_accuracy: acc,
            prune_seconds: 0.0,
            train_seconds: 0.0,
            collapsed_layers: collapsed.into(),
        }
    }

    #[test]
    fn cell_mean_over_three_seeds() {
        let rs = vec![
            row(PruneMethod::Snip, 0.9, 0, 0.5, ""),
            row(PruneMethod::Snip, 0.9, 1, 0.6, ""),
            row(PruneMethod::Snip, 0.9, 2, 0.7, ""),
        ];
        let c = cells(&rs).unwrap();
        assert_eq!(c.len(), 1);
        assert!((c[0].mean - 0.6).abs() < 1e-12);
        assert!((c[0].std - 0.1).abs() < 1e-12);
        assert!(pivot_table(&rs).unwrap().contains("60.00 ± 10.00"));
    }

    #[test]
    fn collapse_is_flagged() {
        let rs = vec![
            row(PruneMethod::Snip, 0.9, 0, 0.1, "3"),
            row(PruneMethod::Drive, 0.9, 0, 0.8, ""),
        ];
        let text = pivot_table(&rs).unwrap();
        let snip_line = text.lines().find(|l| l.starts_with("snip")).unwrap();
        assert!(snip_line.contains("collapse(1/1)"));
        let drive_line = text.lines().find(|l| l.starts_with("drive")).unwrap();
        assert!(drive_line.contains('*'));
    }

    #[test]
    fn single_result_pivot() {
        let text = pivot_table(&[row(PruneMethod::Magnitude, 0.5, 0, 0.9, "")]).unwrap();
        let body: Vec<&str> = text.lines().take_while(|l| !l.is_empty()).collect();
        assert_eq!(body.len(), 3);
        assert!(body[0].contains("50.00%"));
        assert!(body[2].starts_with("imp"));
        // IMP is not an early-pruning method, so nothing is starred
        assert!(!body[2].contains('*'));
    }

    #[test]
    fn empty_results() {
        assert!(matches!(pivot_table(&[]), Err(Error::EmptyResults)));
    }

    #[test]
    fn writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("summary.txt");
        report(&[row(PruneMethod::Drive, 0.98, 1, 0.75, "")], &out).unwrap();
        assert!(std::fs::read_to_string(&out).unwrap().contains("drive"));
        let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(csv.lines().nth(1).unwrap().starts_with("drive,0.98,1,0.75,0,true,0,0"));
    }
}
