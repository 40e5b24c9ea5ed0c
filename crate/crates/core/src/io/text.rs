use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{FileFormatError, Result};
use crate::model::{EnrollmentManifest, ScoreSet, Trial, TrialKey, TrialLabel, TrialList};

const TRIAL_HEADER: [&str; 2] = ["modelid", "segmentid"];
const KEY_HEADER: [&str; 3] = ["modelid", "segmentid", "targettype"];
const KEY_PARTITION_COLUMN: &str = "partition";
const SCORE_HEADER: [&str; 3] = ["modelid", "segmentid", "LLR"];
const DURATION_HEADER: [&str; 2] = ["segmentid", "seconds"];
const MANIFEST_HEADER: [&str; 2] = ["modelid", "segmentid"];

fn fail<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(FileFormatError::new(line, msg).into())
}

/// Yields `(line_number, fields)` for each data line after checking the header.
/// The header may be one of several accepted column layouts; the index of the
/// matched layout is returned.
fn records<'a>(
    text: &'a str,
    headers: &[&[&str]],
) -> Result<(usize, impl Iterator<Item = (usize, Vec<&'a str>)>)> {
    let mut lines = text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l));
    let header = match lines.next() {
        Some(h) => h,
        None => return fail(1, format!("missing header '{}'", headers[0].join("\\t"))),
    };
    let fields: Vec<&str> = header.split('\t').collect();
    let layout = match headers.iter().position(|h| *h == fields.as_slice()) {
        Some(i) => i,
        None => {
            return fail(
                1,
                format!(
                    "missing or wrong header: expected '{}', found '{}'",
                    headers[0].join("\\t"),
                    header
                ),
            )
        }
    };
    let iter = lines
        .enumerate()
        .map(|(i, l)| (i + 2, l.split('\t').collect::<Vec<_>>()));
    Ok((layout, iter))
}

fn expect_columns(line: usize, fields: &[&str], n: usize) -> Result<()> {
    if fields.len() != n {
        return fail(line, format!("expected {n} columns, found {}", fields.len()));
    }
    if let Some(i) = fields.iter().position(|f| f.is_empty()) {
        return fail(line, format!("column {} is empty", i + 1));
    }
    Ok(())
}

/// Parses a tab-separated trial list with header `modelid	segmentid`.
pub fn parse_trial_list(text: &str) -> Result<TrialList> {
    let (_, rows) = records(text, &[&TRIAL_HEADER])?;
    let mut trials = Vec::new();
    for (line, f) in rows {
        expect_columns(line, &f, 2)?;
        trials.push(Trial::new(f[0], f[1]));
    }
    Ok(trials)
}

pub fn write_trial_list(trials: &[Trial]) -> String {
    let mut out = TRIAL_HEADER.join("\t");
    out.push('\n');
    for t in trials {
        let _ = writeln!(out, "{}\t{}", t.model_id, t.segment_id);
    }
    out
}

/// Parses a key with header `modelid	segmentid	targettype[	partition]`.
pub fn parse_key(text: &str) -> Result<TrialKey> {
    let with_partition = [KEY_HEADER[0], KEY_HEADER[1], KEY_HEADER[2], KEY_PARTITION_COLUMN];
    let (layout, rows) = records(text, &[&KEY_HEADER, &with_partition])?;
    let has_partition = layout == 1;
    let ncols = if has_partition { 4 } else { 3 };
    let mut trials = Vec::new();
    let mut labels = Vec::new();
    let mut partitions = Vec::new();
    for (line, f) in rows {
        expect_columns(line, &f, ncols)?;
        let label = match f[2] {
            "target" => TrialLabel::Target,
            "nontarget" => TrialLabel::Nontarget,
            other => return fail(line, format!("unknown targettype '{other}'")),
        };
        trials.push(Trial::new(f[0], f[1]));
        labels.push(label);
        if has_partition {
            partitions.push(f[3].to_string());
        }
    }
    TrialKey::new(trials, labels, has_partition.then_some(partitions))
}

pub fn write_key(key: &TrialKey) -> String {
    let mut out = KEY_HEADER.join("\t");
    if key.partitions().is_some() {
        out.push('\t');
        out.push_str(KEY_PARTITION_COLUMN);
    }
    out.push('\n');
    for (i, (t, l)) in key.trials().iter().zip(key.labels()).enumerate() {
        let _ = write!(out, "{}\t{}\t{}", t.model_id, t.segment_id, l.as_str());
        if let Some(p) = key.partitions() {
            let _ = write!(out, "\t{}", p[i]);
        }
        out.push('\n');
    }
    out
}

/// Parses a finite decimal.
pub fn parse_score_value(field: &str) -> std::result::Result<f64, String> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(format!("non-finite value '{field}'")),
        Err(_) => Err(format!("non-numeric value '{field}'")),
    }
}

/// Shortest decimal that parses back to the same `f64`; always at least as
/// precise as six significant digits.
pub fn format_score(v: f64) -> String {
    format!("{v}")
}

pub fn read_scores(text: &str) -> Result<ScoreSet> {
    let (_, rows) = records(text, &[&SCORE_HEADER])?;
    let mut trials = Vec::new();
    let mut scores = Vec::new();
    for (line, f) in rows {
        expect_columns(line, &f, 3)?;
        let s = parse_score_value(f[2]).map_err(|m| FileFormatError::new(line, m))?;
        trials.push(Trial::new(f[0], f[1]));
        scores.push(s);
    }
    ScoreSet::new(trials, scores)
}

pub fn write_scores(scores: &ScoreSet) -> String {
    let mut out = SCORE_HEADER.join("\t");
    out.push('\n');
    for (t, s) in scores.trials().iter().zip(scores.scores()) {
        let _ = writeln!(out, "{}\t{}\t{}", t.model_id, t.segment_id, format_score(*s));
    }
    out
}

/// Parses a duration table (`segmentid	seconds`, seconds > 0).
pub fn parse_durations(text: &str) -> Result<HashMap<String, f64>> {
    let (_, rows) = records(text, &[&DURATION_HEADER])?;
    let mut out = HashMap::new();
    for (line, f) in rows {
        expect_columns(line, &f, 2)?;
        let secs = parse_score_value(f[1]).map_err(|m| FileFormatError::new(line, m))?;
        if secs <= 0.0 {
            return fail(line, format!("duration must be positive, got {secs}"));
        }
        if out.insert(f[0].to_string(), secs).is_some() {
            return fail(line, format!("duplicate segment '{}'", f[0]));
        }
    }
    Ok(out)
}

/// Writes a duration table sorted by segment id.
pub fn write_durations(durations: &HashMap<String, f64>) -> String {
    let sorted: BTreeMap<_, _> = durations.iter().collect();
    let mut out = DURATION_HEADER.join("\t");
    out.push('\n');
    for (id, secs) in sorted {
        let _ = writeln!(out, "{id}\t{}", format_score(*secs));
    }
    out
}

/// Parses an enrollment manifest: one `modelid	segmentid` pair per line, a
/// model listed once per enrollment segment.
pub fn parse_manifest(text: &str) -> Result<EnrollmentManifest> {
    let (_, rows) = records(text, &[&MANIFEST_HEADER])?;
    let mut models: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (line, f) in rows {
        expect_columns(line, &f, 2)?;
        let segs = models.entry(f[0].to_string()).or_default();
        if segs.iter().any(|s| s == f[1]) {
            return fail(line, format!("segment '{}' listed twice for model '{}'", f[1], f[0]));
        }
        segs.push(f[1].to_string());
    }
    EnrollmentManifest::new(models)
}

pub fn write_manifest(manifest: &EnrollmentManifest) -> String {
    let mut out = MANIFEST_HEADER.join("\t");
    out.push('\n');
    for (m, segs) in manifest.models() {
        for s in segs {
            let _ = writeln!(out, "{m}\t{s}");
        }
    }
    out
}
