//! Manifest CSV (`path,score,ref_id`) and reference-disjoint splits.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    /// As written in the manifest; relative paths resolve against the manifest root.
    pub path: String,
    pub score: f64,
    pub ref_id: String,
    /// Any extra columns.
    pub tags: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub root: PathBuf,
    pub records: Vec<Record>,
    pub score_range: (f64, f64),
}

impl DatasetManifest {
    /// Builds a manifest, checking path uniqueness and the score range.
    pub fn new(
        name: impl Into<String>,
        root: impl Into<PathBuf>,
        records: Vec<Record>,
        score_range: Option<(f64, f64)>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("manifest has no records".into()));
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !r.score.is_finite() {
                return Err(Error::Data(format!("{}: score is not finite", r.path)));
            }
            if !seen.insert(r.path.as_str()) {
                return Err(Error::Data(format!("duplicate path {}", r.path)));
            }
        }
        let observed = records.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r.score), hi.max(r.score))
        });
        let score_range = score_range.unwrap_or(observed);
        if observed.0 < score_range.0 || observed.1 > score_range.1 {
            return Err(Error::Data(format!(
                "scores span [{}, {}], outside declared range [{}, {}]",
                observed.0, observed.1, score_range.0, score_range.1
            )));
        }
        Ok(Self {
            name: name.into(),
            root: root.into(),
            records,
            score_range,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Distinct reference ids in order of first appearance.
    pub fn ref_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.ref_id.as_str()))
            .map(|r| r.ref_id.as_str())
            .collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.score).collect()
    }

    fn subset(&self, suffix: &str, keep: impl Fn(&Record) -> bool) -> Self {
        Self {
            name: format!("{}-{suffix}", self.name),
            root: self.root.clone(),
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            score_range: self.score_range,
        }
    }

    /// Writes the manifest CSV (LF line endings).
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tag_keys: Vec<String> = {
            let mut keys: Vec<String> = self
                .records
                .iter()
                .flat_map(|r| r.tags.keys().cloned())
                .collect();
            keys.sort();
            keys.dedup();
            keys
        };
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut header = vec!["path".to_string(), "score".into(), "ref_id".into()];
        header.extend(tag_keys.iter().cloned());
        let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![r.path.clone(), r.score.to_string(), r.ref_id.clone()];
            row.extend(tag_keys.iter().map(|k| r.tags.get(k).cloned().unwrap_or_default()));
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Reads a manifest CSV. The `path` and `score` columns are required; an empty
/// or missing `ref_id` defaults to the path. The score range is the observed one.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_slice());
    let at = |line: u64, msg: String| Error::Data(format!("{}:{line}: {msg}", path.display()));
    let header = reader.headers().map_err(|e| at(1, e.to_string()))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let path_col = col("path").ok_or_else(|| at(1, "missing column `path`".into()))?;
    let score_col = col("score").ok_or_else(|| at(1, "missing column `score`".into()))?;
    let ref_col = col("ref_id");
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            at(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let p = row.get(path_col).unwrap_or("").to_string();
        if p.is_empty() {
            return Err(at(line, "empty path".into()));
        }
        let raw = row.get(score_col).unwrap_or("");
        let score: f64 = raw
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| at(line, format!("score {raw:?} is not a finite number")))?;
        let ref_id = ref_col
            .and_then(|c| row.get(c))
            .filter(|s| !s.is_empty())
            .unwrap_or(&p)
            .to_string();
        let tags = header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != path_col && *i != score_col && Some(*i) != ref_col)
            .filter_map(|(i, h)| row.get(i).map(|v| (h.to_string(), v.to_string())))
            .collect();
        records.push(Record {
            path: p,
            score,
            ref_id,
            tags,
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::new(name, root, records, None)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Shuffles the reference ids with a seeded RNG and sends the first
/// `⌈ratio·R⌉` (clamped to `1..R`) to the train side.
pub fn split(manifest: &DatasetManifest, seed: u64, ratio: f64) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Invalid(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut ids = manifest.ref_ids();
    if ids.len() < 2 {
        return Err(Error::Data(format!(
            "split needs at least 2 distinct ref_ids, found {}",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * ids.len() as f64).ceil() as usize).clamp(1, ids.len() - 1);
    let train_ids: HashSet<&str> = ids[..n_train].iter().copied().collect();
    let train = manifest.subset("train", |r| train_ids.contains(r.ref_id.as_str()));
    let test = manifest.subset("test", |r| !train_ids.contains(r.ref_id.as_str()));
    Ok((train, test))
}
