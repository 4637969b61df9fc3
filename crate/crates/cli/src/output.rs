//! Run artifacts: JSONL and CSV traces, the crossing table and the summary.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use pglab_core::hard::{A0, A1, A2};
use pglab_core::numeric::fmt17;
use pglab_core::pg::IterationSnapshot;
use pglab_core::RunResult;

pub const TRACE_HEADER: [&str; 11] = [
    "iter", "state", "class", "V", "theta_a0", "theta_a1", "theta_a2", "pi_a1", "d", "sup_err", "mean_err",
];
pub const CROSSING_HEADER: [&str; 4] = ["state", "threshold_name", "threshold_value", "t"];

fn opt17(x: Option<f64>) -> String {
    x.map(fmt17).unwrap_or_default()
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn write_trace_jsonl(path: &Path, run: &RunResult) -> Result<()> {
    let mut out = create(path)?;
    for snap in &run.snapshots {
        serde_json::to_writer(&mut out, snap)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trace_jsonl(path: &Path) -> Result<Vec<IterationSnapshot>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut snaps = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let snap: IterationSnapshot = serde_json::from_str(&line)
            .with_context(|| format!("{}: line {}: malformed snapshot", path.display(), i + 1))?;
        snaps.push(snap);
    }
    Ok(snaps)
}

fn trace_rows(run: &RunResult) -> Vec<[String; 11]> {
    let labels = |s| {
        run.monitored
            .iter()
            .find(|m| m.state == s)
            .map(|m| m.label.clone())
            .unwrap_or_default()
    };
    let mut rows = Vec::new();
    for snap in &run.snapshots {
        for st in &snap.states {
            rows.push([
                snap.iter.to_string(),
                st.state.to_string(),
                labels(st.state),
                fmt17(st.v),
                opt17(st.theta_of(A0)),
                opt17(st.theta_of(A1)),
                opt17(st.theta_of(A2)),
                opt17(st.pi_a1),
                fmt17(st.d),
                fmt17(snap.sup_error),
                fmt17(snap.mean_error),
            ]);
        }
    }
    rows
}

pub fn write_trace_csv(path: &Path, run: &RunResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(TRACE_HEADER)?;
    for row in trace_rows(run) {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Checks that `trace.csv` agrees with the JSONL snapshots value for value.
pub fn check_trace_csv(path: &Path, run: &RunResult) -> Result<()> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    if r.headers()?.iter().ne(TRACE_HEADER) {
        bail!("{}: unexpected header", path.display());
    }
    let expected = trace_rows(run);
    let mut count = 0usize;
    for (i, record) in r.records().enumerate() {
        let record = record.with_context(|| format!("{}: row {}", path.display(), i + 2))?;
        let Some(want) = expected.get(i) else {
            bail!("{}: row {} has no matching snapshot", path.display(), i + 2);
        };
        for (j, (got, want)) in record.iter().zip(want).enumerate() {
            let same = match (got.parse::<f64>(), want.parse::<f64>()) {
                (Ok(a), Ok(b)) => a == b || (a.is_nan() && b.is_nan()),
                _ => got == want,
            };
            if !same {
                bail!(
                    "{}: row {}, column {}: `{got}` disagrees with the snapshot value `{want}`",
                    path.display(),
                    i + 2,
                    TRACE_HEADER[j]
                );
            }
        }
        if record.len() != TRACE_HEADER.len() {
            bail!("{}: row {} has {} fields", path.display(), i + 2, record.len());
        }
        count += 1;
    }
    if count != expected.len() {
        bail!(
            "{}: {count} rows but {} snapshot entries",
            path.display(),
            expected.len()
        );
    }
    Ok(())
}

pub fn write_crossings_csv(path: &Path, run: &RunResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(CROSSING_HEADER)?;
    for rec in &run.crossings.records {
        w.write_record([
            rec.state.to_string(),
            rec.name.clone(),
            fmt17(rec.threshold),
            rec.t.map(|t| t.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Checks that `crossings.csv` matches the crossing table of the summary.
pub fn check_crossings_csv(path: &Path, run: &RunResult) -> Result<()> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let records: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>()?;
    if records.len() != run.crossings.records.len() {
        bail!(
            "{}: {} rows but {} crossing records",
            path.display(),
            records.len(),
            run.crossings.records.len()
        );
    }
    for (i, (row, rec)) in records.iter().zip(&run.crossings.records).enumerate() {
        let t = row.get(3).unwrap_or("");
        let t = if t.is_empty() {
            None
        } else {
            Some(
                t.parse::<u64>()
                    .with_context(|| format!("{}: row {}", path.display(), i + 2))?,
            )
        };
        let state: usize = row
            .get(0)
            .unwrap_or("")
            .parse()
            .with_context(|| format!("{}: row {}", path.display(), i + 2))?;
        if state != rec.state || row.get(1) != Some(rec.name.as_str()) || t != rec.t {
            bail!("{}: row {} disagrees with the summary", path.display(), i + 2);
        }
    }
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Loads a run directory written by `run`.
pub fn load_run(dir: &Path) -> Result<RunResult> {
    let summary = dir.join("summary.json");
    let text = std::fs::read_to_string(&summary).with_context(|| format!("reading {}", summary.display()))?;
    let mut run: RunResult = serde_json::from_str(&text).with_context(|| format!("parsing {}", summary.display()))?;
    run.snapshots = read_trace_jsonl(&dir.join("trace.jsonl"))?;
    check_trace_csv(&dir.join("trace.csv"), &run)?;
    check_crossings_csv(&dir.join("crossings.csv"), &run)?;
    Ok(run)
}
