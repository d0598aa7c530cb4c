use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskKind};
use crate::{Error, Result};

pub const DEFAULT_MISSING_MARKERS: &[&str] = &["", "NA", "N/A", "NaN", "nan", "null", "?"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    /// Raw token for each code `0..K`.
    pub categories: Vec<String>,
    pub missing_markers: Vec<String>,
}

impl ColumnSchema {
    fn code(&self, token: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == token)
    }
}

/// Inferred layout of an ingested file, reusable for files with the same
/// columns so that category codes agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub features: Vec<ColumnSchema>,
    pub target: ColumnSchema,
    pub task: TaskKind,
    /// Columns dropped because every cell was missing.
    pub dropped: Vec<String>,
    /// Cells in numeric columns that failed to parse and became missing.
    pub unparseable: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IngestOptions {
    pub task: Option<TaskKind>,
    /// Per-column kind overrides by header name.
    pub overrides: HashMap<String, ColumnKind>,
    /// Defaults to [`DEFAULT_MISSING_MARKERS`] when empty.
    pub missing_markers: Vec<String>,
}

/// Header and string cells of a CSV file.
pub fn read_csv_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(rec.iter().map(|c| c.trim().to_string()).collect());
    }
    Ok((header, rows))
}

fn parse_num(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Dictionary of distinct tokens: numeric order when every token parses,
/// order of first appearance otherwise.
fn dictionary<'a>(tokens: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for t in tokens {
        if !seen.iter().any(|s| s == t) {
            seen.push(t.to_string());
        }
    }
    if seen.iter().all(|s| parse_num(s).is_some()) {
        seen.sort_by(|a, b| parse_num(a).unwrap().total_cmp(&parse_num(b).unwrap()));
    }
    seen
}

fn categorical_threshold(n: usize) -> usize {
    20.max(n * 5 / 100)
}

/// Reads `path`, infers a schema and returns the dataset. A column is
/// categorical when it holds non-numeric tokens or at most
/// `max(20, 5% of rows)` distinct values, unless overridden. Rows whose
/// target is missing are dropped.
pub fn ingest_csv(path: &Path, target: &str, opts: &IngestOptions) -> Result<(Dataset, Schema)> {
    let (header, rows) = read_csv_table(path)?;
    let markers: Vec<String> = if opts.missing_markers.is_empty() {
        DEFAULT_MISSING_MARKERS.iter().map(|s| s.to_string()).collect()
    } else {
        opts.missing_markers.clone()
    };
    let is_missing = |s: &str| markers.iter().any(|m| m == s);
    let t = header
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| Error::Data(format!("target column `{target}` not found")))?;
    let rows: Vec<Vec<String>> = rows
        .into_iter()
        .enumerate()
        .filter(|(i, r)| {
            let keep = !is_missing(&r[t]);
            if !keep {
                log::warn!("row {i}: missing target, dropped");
            }
            keep
        })
        .map(|(_, r)| r)
        .collect();
    if rows.is_empty() {
        return Err(Error::Data("no rows with a target value".into()));
    }
    let n = rows.len();
    let column = |j: usize| rows.iter().map(move |r| r[j].as_str());

    let target_tokens: Vec<&str> = column(t).collect();
    let all_numeric_target = target_tokens.iter().all(|s| parse_num(s).is_some());
    let task = opts.task.unwrap_or_else(|| {
        if !all_numeric_target || dictionary(target_tokens.iter().copied()).len() <= categorical_threshold(n) {
            TaskKind::Classification
        } else {
            TaskKind::Regression
        }
    });
    let target_schema = ColumnSchema {
        name: target.to_string(),
        kind: ColumnKind::Target,
        categories: match task {
            TaskKind::Classification => dictionary(target_tokens.iter().copied()),
            TaskKind::Regression => {
                if !all_numeric_target {
                    return Err(Error::Data(format!("regression target `{target}` has non-numeric values")));
                }
                Vec::new()
            }
        },
        missing_markers: markers.clone(),
    };

    let mut features = Vec::new();
    let mut dropped = Vec::new();
    for (j, name) in header.iter().enumerate() {
        if j == t {
            continue;
        }
        let present: Vec<&str> = column(j).filter(|s| !is_missing(s)).collect();
        if present.is_empty() {
            log::warn!("column `{name}` is entirely missing, dropped");
            dropped.push(name.clone());
            continue;
        }
        let kind = match opts.overrides.get(name) {
            Some(ColumnKind::Target) => {
                return Err(Error::Config(format!("column `{name}` cannot be overridden as the target")))
            }
            Some(k) => *k,
            None => {
                let numeric = present.iter().all(|s| parse_num(s).is_some());
                if !numeric || dictionary(present.iter().copied()).len() <= categorical_threshold(n) {
                    ColumnKind::Categorical
                } else {
                    ColumnKind::Numeric
                }
            }
        };
        features.push((
            j,
            ColumnSchema {
                name: name.clone(),
                kind,
                categories: match kind {
                    ColumnKind::Categorical => dictionary(present.into_iter()),
                    _ => Vec::new(),
                },
                missing_markers: markers.clone(),
            },
        ));
    }
    let mut schema = Schema {
        features: features.iter().map(|(_, c)| c.clone()).collect(),
        target: target_schema,
        task,
        dropped,
        unparseable: 0,
    };
    let ds = encode(&header, &rows, &mut schema, true)?;
    Ok((ds, schema))
}

fn encode(header: &[String], rows: &[Vec<String>], schema: &mut Schema, need_target: bool) -> Result<Dataset> {
    let index: HashMap<&str, usize> = header.iter().enumerate().map(|(j, h)| (h.as_str(), j)).collect();
    let cols: Vec<usize> = schema
        .features
        .iter()
        .map(|c| {
            index
                .get(c.name.as_str())
                .copied()
                .ok_or_else(|| Error::Data(format!("column `{}` not found", c.name)))
        })
        .collect::<Result<_>>()?;
    let t = index.get(schema.target.name.as_str()).copied();
    if need_target && t.is_none() {
        return Err(Error::Data(format!("target column `{}` not found", schema.target.name)));
    }
    let (n, d) = (rows.len(), cols.len());
    let mut x = Vec::with_capacity(n * d);
    let mut missing = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    let mut unparseable = 0;
    for (i, r) in rows.iter().enumerate() {
        for (c, &j) in schema.features.iter().zip(&cols) {
            let tok = r[j].as_str();
            let v = if c.missing_markers.iter().any(|m| m == tok) {
                None
            } else {
                match c.kind {
                    ColumnKind::Categorical => c.code(tok).map(|k| k as f64),
                    _ => {
                        let v = parse_num(tok);
                        if v.is_none() {
                            unparseable += 1;
                        }
                        v
                    }
                }
            };
            x.push(v.unwrap_or(0.0));
            missing.push(v.is_none());
        }
        y.push(match t {
            None => 0.0,
            Some(t) => {
                let tok = r[t].as_str();
                match schema.task {
                    TaskKind::Classification => schema
                        .target
                        .code(tok)
                        .ok_or_else(|| Error::Data(format!("row {i}: unknown class `{tok}`")))?
                        as f64,
                    TaskKind::Regression => parse_num(tok)
                        .ok_or_else(|| Error::Data(format!("row {i}: target `{tok}` is not a number")))?,
                }
            }
        });
    }
    schema.unparseable += unparseable;
    if unparseable > 0 {
        log::warn!("{unparseable} numeric cells failed to parse and were treated as missing");
    }
    let num_classes = match schema.task {
        TaskKind::Classification => schema.target.categories.len().max(2),
        TaskKind::Regression => 0,
    };
    let mut ds = Dataset::new(n, d, x, y, schema.task, num_classes)?;
    ds.categorical = schema.features.iter().map(|c| c.kind == ColumnKind::Categorical).collect();
    ds.missing = missing.iter().any(|&m| m).then_some(missing);
    Ok(ds)
}

impl Schema {
    /// Encodes another file with this schema. Unseen categories become
    /// missing; a missing target column yields zero responses.
    pub fn apply(&self, path: &Path) -> Result<(Dataset, bool)> {
        let (header, rows) = read_csv_table(path)?;
        let has_target = header.iter().any(|h| *h == self.target.name);
        let mut schema = self.clone();
        schema.unparseable = 0;
        let ds = encode(&header, &rows, &mut schema, false)?;
        Ok((ds, has_target))
    }

    /// Raw class token for each label code.
    pub fn class_names(&self) -> &[String] {
        &self.target.categories
    }
}

/// Writes `ds` as CSV with columns `x0..x{d-1}` and `target`; missing cells
/// are empty. Returns options under which [`ingest_csv`] reproduces the
/// dataset exactly.
pub fn export_csv(ds: &Dataset, path: &Path) -> Result<IngestOptions> {
    let mut w = csv::Writer::from_path(path)?;
    let names: Vec<String> = (0..ds.d).map(|j| format!("x{j}")).collect();
    w.write_record(names.iter().map(String::as_str).chain(["target"]))?;
    for i in 0..ds.n {
        let mut rec: Vec<String> = (0..ds.d)
            .map(|j| {
                if ds.is_missing(i, j) {
                    String::new()
                } else {
                    format!("{}", ds.get(i, j))
                }
            })
            .collect();
        rec.push(format!("{}", ds.y[i]));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let overrides: BTreeMap<String, ColumnKind> = names
        .into_iter()
        .zip(&ds.categorical)
        .map(|(n, &c)| (n, if c { ColumnKind::Categorical } else { ColumnKind::Numeric }))
        .collect();
    Ok(IngestOptions {
        task: Some(ds.task),
        overrides: overrides.into_iter().collect(),
        missing_markers: vec![String::new()],
    })
}
