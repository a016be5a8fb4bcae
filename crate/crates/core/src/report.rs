//! CSV reports of a run and aggregation over several runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::fmt_metric;
use crate::train::ExperimentResult;

pub const PER_CLASS: &str = "per_class.csv";
pub const SUMMARY: &str = "summary.csv";
pub const FUSION: &str = "fusion.csv";
pub const LOSSES: &str = "losses.csv";
pub const RUN_INFO: &str = "run.txt";

pub fn per_class_csv(r: &ExperimentResult) -> String {
    let mut s = String::from("step,class_id,iou\n");
    for st in &r.steps {
        for &(c, v) in &st.per_class {
            writeln!(s, "{},{},{}", st.step, c, fmt_metric(v)).unwrap();
        }
    }
    s
}

pub fn summary_csv(r: &ExperimentResult) -> String {
    let mut s = String::from("step,group,miou\n");
    for st in &r.steps {
        for (group, v) in [("old", st.old), ("new", st.new), ("all", st.all)] {
            writeln!(s, "{},{},{}", st.step, group, fmt_metric(v)).unwrap();
        }
    }
    s
}

pub fn fusion_csv(r: &ExperimentResult) -> String {
    let mut s = String::from("step,epoch,mode,old,new,all\n");
    for f in &r.fusion {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            f.step,
            f.epoch,
            f.mode,
            fmt_metric(f.old),
            fmt_metric(f.new),
            fmt_metric(f.all)
        )
        .unwrap();
    }
    s
}

pub fn losses_csv(r: &ExperimentResult) -> String {
    let mut s = String::from("step,epoch,seg,ad,d,total,gamma\n");
    for row in &r.losses {
        let l = &row.loss;
        writeln!(
            s,
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            row.step, row.epoch, l.seg, l.ad, l.d, l.total, l.gamma
        )
        .unwrap();
    }
    s
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes the four CSV files plus `run.txt` (`key = value` lines from
/// `info`) into `dir`.
pub fn write_reports(dir: &Path, r: &ExperimentResult, info: &[(&str, String)]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut run = String::new();
    for (k, v) in info {
        writeln!(run, "{k} = {v}").unwrap();
    }
    Ok(vec![
        write(dir, PER_CLASS, &per_class_csv(r))?,
        write(dir, SUMMARY, &summary_csv(r))?,
        write(dir, FUSION, &fusion_csv(r))?,
        write(dir, LOSSES, &losses_csv(r))?,
        write(dir, RUN_INFO, &run)?,
    ])
}

/// One `summary.csv` row.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub step: usize,
    pub group: String,
    pub miou: Option<f64>,
}

pub fn parse_summary(text: &str, path: &Path) -> Result<Vec<SummaryRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("step,group,miou") {
        return Err(Error::format(path, "missing `step,group,miou` header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = || Error::format(path, format!("line {}: malformed row `{l}`", i + 2));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            let miou = match f[2] {
                "NA" => None,
                v => Some(v.parse().map_err(|_| bad())?),
            };
            Ok(SummaryRow {
                step: f[0].parse().map_err(|_| bad())?,
                group: f[1].to_string(),
                miou,
            })
        })
        .collect()
}

/// Reads `run.txt` into ordered pairs.
pub fn read_run_info(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(RUN_INFO);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(crate::config::parse_pairs(&text)?
        .into_iter()
        .map(|(_, k, v)| (k, v))
        .collect())
}

/// Mean final-step mIoU per `(variant, group)` over run directories.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub variant: String,
    pub group: String,
    pub mean: Option<f64>,
    pub runs: usize,
}

pub fn aggregate(dirs: &[PathBuf]) -> Result<Vec<Aggregate>> {
    let mut acc: BTreeMap<(String, String), (Vec<f64>, usize)> = BTreeMap::new();
    for dir in dirs {
        let info = read_run_info(dir)?;
        let variant = info.get("variant").cloned().unwrap_or_else(|| dir.display().to_string());
        let path = dir.join(SUMMARY);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let rows = parse_summary(&text, &path)?;
        let last = rows.iter().map(|r| r.step).max().unwrap_or(0);
        for r in rows.into_iter().filter(|r| r.step == last) {
            let e = acc.entry((variant.clone(), r.group)).or_default();
            e.1 += 1;
            if let Some(v) = r.miou {
                e.0.push(v);
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|((variant, group), (vals, runs))| Aggregate {
            variant,
            group,
            mean: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
            runs,
        })
        .collect())
}

pub fn aggregate_csv(rows: &[Aggregate]) -> String {
    let mut s = String::from("variant,group,mean_miou,runs\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.variant, r.group, fmt_metric(r.mean), r.runs).unwrap();
    }
    s
}
