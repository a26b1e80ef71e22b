//! Aggregates a run directory into a text summary and per-method boxplots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::runner::{CONFIDENCE_FILE, RESULTS_FILE};
use super::svg::boxplot_svg;
use super::{io_at, CliError};
use crate::eval::{summarize_scores, ScoreKind};

pub const METRICS: [&str; 5] = ["acc", "masked_acc", "macc", "bwt", "forgetting"];

/// Tolerance for the per-row sanity checks on metrics.
const SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub buffer_capacity: Option<usize>,
    pub seed: u64,
    pub fold: usize,
    /// Values in `METRICS` order; `None` where a metric is undefined.
    pub metrics: [Option<f64>; 5],
}

impl ResultRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        METRICS.iter().position(|m| *m == name).and_then(|i| self.metrics[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricStat {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation and standard error; absent for a single run.
    pub std: Option<f64>,
    pub stderr: Option<f64>,
    /// 1 for the best group on this metric, 2 for the runner-up.
    pub rank: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub buffer_capacity: Option<usize>,
    pub runs: usize,
    pub stats: [Option<MetricStat>; 5],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub rows: Vec<SummaryRow>,
    pub text: String,
    pub files: Vec<PathBuf>,
}

fn report_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Report(format!("{}: {e}", path.display()))
}

fn opt_f64(s: &str) -> Result<Option<f64>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| format!("not a number: {s:?}"))
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| report_err(path, e))?;
    let headers = reader.headers().map_err(|e| report_err(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| report_err(path, format!("missing column {name}")))
    };
    let method = col("method")?;
    let cap = col("buffer_capacity")?;
    let seed = col("seed")?;
    let fold = col("fold")?;
    let metric_cols: Vec<usize> = METRICS.iter().map(|m| col(m)).collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| report_err(path, e))?;
        let at = |e: String| report_err(path, format!("row {}: {e}", i + 1));
        let mut metrics = [None; 5];
        for (slot, &c) in metrics.iter_mut().zip(&metric_cols) {
            *slot = opt_f64(&record[c]).map_err(at)?;
        }
        let parse_int = |c: usize| record[c].parse::<u64>().map_err(|_| at(format!("bad integer {:?}", &record[c])));
        let row = ResultRow {
            method: record[method].to_string(),
            buffer_capacity: if record[cap].is_empty() {
                None
            } else {
                Some(parse_int(cap)? as usize)
            },
            seed: parse_int(seed)?,
            fold: parse_int(fold)? as usize,
            metrics,
        };
        check_row(&row).map_err(at)?;
        rows.push(row);
    }
    Ok(rows)
}

fn check_row(row: &ResultRow) -> Result<(), String> {
    let (acc, masked) = (row.metric("acc"), row.metric("masked_acc"));
    if let (Some(a), Some(m)) = (acc, masked) {
        if m < a - SLACK {
            return Err(format!("masked_acc {m} below acc {a}"));
        }
    }
    if let Some(f) = row.metric("forgetting") {
        if f < -SLACK {
            return Err(format!("negative forgetting {f}"));
        }
    }
    Ok(())
}

fn stat(values: &[f64]) -> Option<MetricStat> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let (std, stderr) = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (Some(var.sqrt()), Some(var.sqrt() / (n as f64).sqrt()))
    } else {
        (None, None)
    };
    Some(MetricStat {
        n,
        mean,
        std,
        stderr,
        rank: None,
    })
}

type GroupKey = (String, Option<usize>);
type ScoreGroupKey = (String, Option<usize>, ScoreKind);

/// Groups keep first-appearance order, which matches the run's job order.
fn group(rows: &[ResultRow]) -> Vec<(GroupKey, Vec<&ResultRow>)> {
    let mut out: Vec<(GroupKey, Vec<&ResultRow>)> = Vec::new();
    for r in rows {
        let key = (r.method.clone(), r.buffer_capacity);
        match out.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(r),
            None => out.push((key, vec![r])),
        }
    }
    out
}

pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut summary: Vec<SummaryRow> = group(rows)
        .into_iter()
        .map(|((method, buffer_capacity), members)| {
            let stats = std::array::from_fn(|m| {
                let values: Vec<f64> = members.iter().filter_map(|r| r.metrics[m]).collect();
                stat(&values)
            });
            SummaryRow {
                method,
                buffer_capacity,
                runs: members.len(),
                stats,
            }
        })
        .collect();
    for (m, name) in METRICS.iter().enumerate() {
        let lower_is_better = *name == "forgetting";
        let mut order: Vec<(usize, f64)> = summary
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.stats[m].as_ref().map(|st| (i, st.mean)))
            .collect();
        order.sort_by(|a, b| {
            let c = a.1.total_cmp(&b.1);
            if lower_is_better { c } else { c.reverse() }
        });
        // Tied means share a rank; the runner-up is the next distinct mean.
        let mut distinct: Vec<f64> = order.iter().map(|o| o.1).collect();
        distinct.dedup();
        for (i, mean) in order {
            let rank = distinct.iter().position(|&d| d == mean).filter(|&r| r < 2);
            if let Some(st) = summary[i].stats[m].as_mut() {
                st.rank = rank.map(|r| r as u8 + 1);
            }
        }
    }
    summary
}

fn group_label(method: &str, cap: Option<usize>) -> String {
    match cap {
        Some(c) => format!("{method} (capacity {c})"),
        None => method.to_string(),
    }
}

fn render(summary: &[SummaryRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Metrics: mean ± sample std (stderr). * best, + second best.");
    let _ = writeln!(s, "Forgetting ranks lower as better; all others rank higher as better.\n");
    for row in summary {
        let _ = writeln!(s, "{} [{} runs]", group_label(&row.method, row.buffer_capacity), row.runs);
        for (name, st) in METRICS.iter().zip(&row.stats) {
            let cell = match st {
                None => "n/a".to_string(),
                Some(st) => {
                    let mark = match st.rank {
                        Some(1) => " *",
                        Some(2) => " +",
                        _ => "",
                    };
                    match (st.std, st.stderr) {
                        (Some(sd), Some(se)) => format!("{:.4} ± {sd:.4} ({se:.4}){mark}", st.mean),
                        _ => format!("{:.4}{mark}", st.mean),
                    }
                }
            };
            let _ = writeln!(s, "  {name:<11} {cell}");
        }
        s.push('\n');
    }
    s
}

struct ScoreRow {
    method: String,
    cap: Option<usize>,
    eval_task: usize,
    train_stage: usize,
    score: f64,
    kind: ScoreKind,
}

fn read_scores(path: &Path) -> Result<Vec<ScoreRow>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| report_err(path, e))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let r = record.map_err(|e| report_err(path, e))?;
        if r.len() < 10 {
            return Err(report_err(path, "short confidence row"));
        }
        let bad = |what: &str| report_err(path, format!("bad {what} in confidence row"));
        out.push(ScoreRow {
            method: r[0].to_string(),
            cap: if r[1].is_empty() { None } else { Some(r[1].parse().map_err(|_| bad("capacity"))?) },
            eval_task: r[4].parse().map_err(|_| bad("eval_task"))?,
            train_stage: r[5].parse().map_err(|_| bad("train_stage"))?,
            score: r[8].parse().map_err(|_| bad("score"))?,
            kind: ScoreKind::parse(&r[9]).ok_or_else(|| bad("score_kind"))?,
        });
    }
    Ok(out)
}

/// Final-stage score statistics per evaluated task, for one method group.
pub fn final_stage_boxes(scores: &[&ScoreRowView]) -> Vec<(String, [f64; 6])> {
    let Some(last) = scores.iter().map(|s| s.train_stage).max() else {
        return Vec::new();
    };
    let mut by_task: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for s in scores.iter().filter(|s| s.train_stage == last) {
        by_task.entry(s.eval_task).or_default().push(s.score);
    }
    by_task
        .into_iter()
        .filter_map(|(t, v)| summarize_scores(&v).map(|st| (format!("task {t}"), st)))
        .collect()
}

/// Borrowed view of a confidence row used for boxplot grouping.
pub struct ScoreRowView {
    pub eval_task: usize,
    pub train_stage: usize,
    pub score: f64,
}

fn file_stem(method: &str, cap: Option<usize>) -> String {
    match cap {
        Some(c) => format!("boxplot-{method}-c{c}.svg"),
        None => format!("boxplot-{method}.svg"),
    }
}

/// Reads `dir`'s results and confidence CSVs; writes `summary.txt` and one
/// boxplot per method group into `out`.
pub fn emit_report(dir: &Path, out: &Path) -> Result<ReportSummary, CliError> {
    let rows = read_results(&dir.join(RESULTS_FILE))?;
    let summary = summarize(&rows);
    let text = render(&summary);
    std::fs::create_dir_all(out).map_err(io_at(out))?;
    let summary_path = out.join("summary.txt");
    std::fs::write(&summary_path, &text).map_err(io_at(&summary_path))?;
    let mut files = vec![summary_path];

    let conf_path = dir.join(CONFIDENCE_FILE);
    if conf_path.exists() {
        let scores = read_scores(&conf_path)?;
        let mut groups: Vec<(ScoreGroupKey, Vec<ScoreRowView>)> = Vec::new();
        for s in scores {
            let key = (s.method, s.cap, s.kind);
            let view = ScoreRowView {
                eval_task: s.eval_task,
                train_stage: s.train_stage,
                score: s.score,
            };
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(view),
                None => groups.push((key, vec![view])),
            }
        }
        for ((method, cap, kind), views) in groups {
            let refs: Vec<&ScoreRowView> = views.iter().collect();
            let boxes = final_stage_boxes(&refs);
            let title = format!("{}: {} of the true class, final stage", group_label(&method, cap), kind.as_str());
            let path = out.join(file_stem(&method, cap));
            std::fs::write(&path, boxplot_svg(&title, kind, &boxes)).map_err(io_at(&path))?;
            files.push(path);
        }
    }
    Ok(ReportSummary {
        rows: summary,
        text,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, cap: Option<usize>, seed: u64, metrics: [Option<f64>; 5]) -> ResultRow {
        ResultRow {
            method: method.into(),
            buffer_capacity: cap,
            seed,
            fold: 0,
            metrics,
        }
    }

    #[test]
    fn dispersion_uses_sample_std() {
        let rows = vec![
            row("finetune", None, 0, [Some(0.2), Some(0.5), Some(0.3), None, None]),
            row("finetune", None, 1, [Some(0.4), Some(0.7), Some(0.5), None, None]),
            row("finetune", None, 2, [Some(0.6), Some(0.9), Some(0.7), None, None]),
        ];
        let s = summarize(&rows);
        let acc = s[0].stats[0].as_ref().unwrap();
        assert!((acc.mean - 0.4).abs() < 1e-12);
        assert!((acc.std.unwrap() - 0.2).abs() < 1e-12);
        assert!((acc.stderr.unwrap() - 0.2 / 3f64.sqrt()).abs() < 1e-12);
        assert!(s[0].stats[3].is_none());
    }

    #[test]
    fn single_run_has_no_dispersion() {
        let s = summarize(&[row("ewc", None, 0, [Some(0.5); 5])]);
        let st = s[0].stats[0].as_ref().unwrap();
        assert_eq!((st.std, st.stderr), (None, None));
        assert!(render(&s).contains("0.5000 *"));
    }

    #[test]
    fn ranks_flip_for_forgetting() {
        let m = |acc: f64, f: f64| [Some(acc), Some(acc), Some(acc), Some(-f), Some(f)];
        let rows = vec![
            row("finetune", None, 0, m(0.3, 0.6)),
            row("derpp", Some(10), 0, m(0.6, 0.2)),
            row("buro", Some(10), 0, m(0.5, 0.1)),
        ];
        let s = summarize(&rows);
        let rank = |g: usize, m: usize| s[g].stats[m].as_ref().unwrap().rank;
        assert_eq!((rank(1, 0), rank(2, 0), rank(0, 0)), (Some(1), Some(2), None));
        assert_eq!((rank(2, 4), rank(1, 4), rank(0, 4)), (Some(1), Some(2), None));
    }

    #[test]
    fn tied_means_share_a_rank() {
        let rows = vec![
            row("a", None, 0, [Some(1.0); 5]),
            row("b", None, 0, [Some(1.0); 5]),
            row("c", None, 0, [Some(0.5); 5]),
        ];
        let s = summarize(&rows);
        let ranks: Vec<_> = s.iter().map(|g| g.stats[0].as_ref().unwrap().rank).collect();
        assert_eq!(ranks, vec![Some(1), Some(1), Some(2)]);
    }

    #[test]
    fn rows_violating_dominance_are_rejected() {
        assert!(check_row(&row("x", None, 0, [Some(0.6), Some(0.5), None, None, None])).is_err());
        assert!(check_row(&row("x", None, 0, [None, None, None, None, Some(-0.1)])).is_err());
        assert!(check_row(&row("x", None, 0, [Some(0.5), Some(0.5), None, None, Some(0.0)])).is_ok());
    }

    #[test]
    fn boxes_use_only_the_final_stage() {
        let v = |t, s, x| ScoreRowView {
            eval_task: t,
            train_stage: s,
            score: x,
        };
        let views = [v(0, 0, 100.0), v(0, 1, 0.1), v(0, 1, 0.3), v(1, 1, 0.5)];
        let refs: Vec<&ScoreRowView> = views.iter().collect();
        let boxes = final_stage_boxes(&refs);
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[0].1[4], 0.3);
        assert!((boxes[0].1[2] - 0.2).abs() < 1e-9);
    }
}
