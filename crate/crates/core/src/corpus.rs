//! Loading, normalizing, filtering, and splitting labeled short-sentence
//! datasets.
//!
//! Normalization replaces punctuation with spaces, applies Turkish-aware
//! lowercasing ('İ'→'i', 'I'→'ı'), and whitespace-tokenizes. Splitting is
//! stratified per class with a seeded shuffle so partitions are reproducible.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

/// Bundled Turkish stopword list, one token per line. Applied only in the
/// paragraph-vector pipeline; a custom list can be supplied instead.
pub const TURKISH_STOPWORDS: &str = include_str!("../data/stopwords_tr.txt");

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("record {index}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: i64,
        classes: usize,
    },
    #[error("class {label} has {count} records; stratified split needs at least 2")]
    TooSmallForStratify { label: usize, count: usize },
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Jsonl,
    Csv,
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataFormat::Jsonl => write!(f, "jsonl"),
            DataFormat::Csv => write!(f, "csv"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub id: usize,
    pub text: String,
    pub label: usize,
    /// Normalized tokens; filled by `Dataset::normalize`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<LabeledSentence>,
    pub class_count: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    text: String,
    label: i64,
}

impl Dataset {
    pub fn new(records: Vec<LabeledSentence>, class_count: usize) -> Self {
        for r in &records {
            assert!(
                r.label < class_count,
                "record {}: label {} out of range for {} classes",
                r.id,
                r.label,
                class_count
            );
        }
        Dataset {
            records,
            class_count,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Per-label record counts; sums to `len()`.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.class_count];
        for r in &self.records {
            hist[r.label] += 1;
        }
        hist
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Fills `tokens` on every record.
    pub fn normalize(&mut self) {
        for r in &mut self.records {
            r.tokens = normalize(&r.text);
        }
    }

    /// Removes stoplist tokens from every record in place.
    pub fn remove_stopwords(&mut self, stoplist: &HashSet<String>) {
        for r in &mut self.records {
            r.tokens = remove_stopwords(std::mem::take(&mut r.tokens), stoplist);
        }
    }

    /// Writes the dataset as JSONL ({"text":…,"label":…}, one per line).
    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        use std::io::Write;
        let mut f = File::create(path).map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        for r in &self.records {
            let line = serde_json::to_string(&JsonlRecord {
                text: r.text.clone(),
                label: r.label as i64,
            })
            .expect("record serialization cannot fail");
            writeln!(f, "{line}").map_err(|e| CorpusError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        Ok(())
    }
}

/// Loads a JSONL or CSV dataset, preserving input order and assigning
/// sequential record ids. When `declared_classes` is given, any label
/// outside [0, K) is an error; otherwise K is inferred as max label + 1.
pub fn load_dataset(
    path: &Path,
    format: DataFormat,
    declared_classes: Option<usize>,
) -> Result<Dataset, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let raw: Vec<(String, i64)> = match format {
        DataFormat::Jsonl => {
            let reader = BufReader::new(file);
            let mut rows = Vec::new();
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| CorpusError::Io {
                    path: path.display().to_string(),
                    source: e,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: JsonlRecord =
                    serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                rows.push((rec.text, rec.label));
            }
            rows
        }
        DataFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(true)
                .from_reader(file);
            {
                let headers = reader.headers().map_err(|e| CorpusError::Malformed {
                    line: 1,
                    message: e.to_string(),
                })?;
                if headers.len() < 2 || &headers[0] != "text" || &headers[1] != "label" {
                    return Err(CorpusError::Malformed {
                        line: 1,
                        message: format!("expected header \"text,label\", got {headers:?}"),
                    });
                }
            }
            let mut rows = Vec::new();
            for (i, rec) in reader.records().enumerate() {
                let rec = rec.map_err(|e| CorpusError::Malformed {
                    line: i + 2,
                    message: e.to_string(),
                })?;
                let text = rec.get(0).unwrap_or("").to_string();
                let label: i64 = rec.get(1).unwrap_or("").trim().parse().map_err(|_| {
                    CorpusError::Malformed {
                        line: i + 2,
                        message: format!("label {:?} is not an integer", rec.get(1)),
                    }
                })?;
                rows.push((text, label));
            }
            rows
        }
    };

    if raw.is_empty() {
        return Err(CorpusError::EmptyDataset(path.display().to_string()));
    }
    for (i, (text, label)) in raw.iter().enumerate() {
        if text.trim().is_empty() {
            return Err(CorpusError::Malformed {
                line: i + 1,
                message: "empty text".into(),
            });
        }
        if *label < 0 {
            return Err(CorpusError::Malformed {
                line: i + 1,
                message: format!("negative label {label}"),
            });
        }
    }
    let max_label = raw.iter().map(|(_, l)| *l).max().unwrap() as usize;
    let class_count = declared_classes.unwrap_or(max_label + 1);
    if let Some((index, (_, label))) = raw
        .iter()
        .enumerate()
        .find(|(_, (_, l))| *l as usize >= class_count)
    {
        return Err(CorpusError::LabelOutOfRange {
            index,
            label: *label,
            classes: class_count,
        });
    }

    let records = raw
        .into_iter()
        .enumerate()
        .map(|(id, (text, label))| LabeledSentence {
            id,
            text,
            label: label as usize,
            tokens: Vec::new(),
        })
        .collect();
    Ok(Dataset::new(records, class_count))
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || ('\u{2000}'..='\u{206f}').contains(&c)
}

fn lower_turkish(c: char) -> impl Iterator<Item = char> {
    // Dotted/dotless I need special handling; naive folding corrupts them.
    let mapped: Vec<char> = match c {
        'İ' => vec!['i'],
        'I' => vec!['ı'],
        _ => c.to_lowercase().collect(),
    };
    mapped.into_iter()
}

/// Punctuation → spaces, Turkish-aware lowercasing, whitespace tokenization.
/// Empty input gives an empty list; output tokens are never empty strings.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(|c| {
            if is_punct(c) {
                vec![' '].into_iter()
            } else {
                lower_turkish(c).collect::<Vec<_>>().into_iter()
            }
        })
        .collect();
    cleaned.split_whitespace().map(|t| t.to_string()).collect()
}

/// Drops tokens present in the stoplist, preserving survivor order.
pub fn remove_stopwords(tokens: Vec<String>, stoplist: &HashSet<String>) -> Vec<String> {
    tokens
        .into_iter()
        .filter(|t| !stoplist.contains(t.as_str()))
        .collect()
}

/// Parses a one-token-per-line stoplist.
pub fn parse_stoplist(contents: &str) -> HashSet<String> {
    contents
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

/// Splits into (train, test). Stratified mode sends
/// floor(test_fraction × class size) records of every class to test,
/// chosen by a seeded per-class shuffle; the remainder trains. Both halves
/// keep the original record order.
pub fn stratified_split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset), CorpusError> {
    assert!(
        spec.test_fraction > 0.0 && spec.test_fraction < 1.0,
        "test_fraction must be in (0,1), got {}",
        spec.test_fraction
    );
    let mut test_ids: HashSet<usize> = HashSet::new();
    if spec.stratified {
        for (label, count) in ds.class_histogram().iter().enumerate() {
            if *count == 0 {
                continue;
            }
            if *count < 2 {
                return Err(CorpusError::TooSmallForStratify {
                    label,
                    count: *count,
                });
            }
            let mut members: Vec<usize> = ds
                .records
                .iter()
                .filter(|r| r.label == label)
                .map(|r| r.id)
                .collect();
            let mut rng = Rng::derived(spec.seed, "split.class", label as u64);
            rng.shuffle(&mut members);
            let take = (spec.test_fraction * *count as f64).floor() as usize;
            test_ids.extend(members.into_iter().take(take));
        }
    } else {
        let mut ids: Vec<usize> = ds.records.iter().map(|r| r.id).collect();
        let mut rng = Rng::derived(spec.seed, "split.global", 0);
        rng.shuffle(&mut ids);
        let take = (spec.test_fraction * ds.len() as f64).floor() as usize;
        test_ids.extend(ids.into_iter().take(take));
    }

    let (mut train, mut test) = (Vec::new(), Vec::new());
    for r in &ds.records {
        if test_ids.contains(&r.id) {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((
        Dataset::new(train, ds.class_count),
        Dataset::new(test, ds.class_count),
    ))
}
