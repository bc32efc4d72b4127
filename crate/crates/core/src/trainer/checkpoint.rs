//! Checkpoint directory: `meta.txt` (`key = value`), `tensors.bin` (raw
//! little-endian f32) and `index.csv` (`name,shape,offset,length`, byte units).

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::{is_model_key, model_config_from_pairs, model_pairs};
use crate::error::{Error, Result};
use crate::model::{Model, ScoreScale};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.txt";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const INDEX_FILE: &str = "index.csv";
const INDEX_HEADER: &str = "name,shape,offset,length";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: usize,
    pub epoch: usize,
    /// Echoed configuration; model keys are always written from the model itself.
    pub config: Vec<(String, String)>,
}

impl CheckpointMeta {
    pub fn new(step: usize, epoch: usize, config: &[(String, String)]) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            step,
            epoch,
            config: config.to_vec(),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

/// Writes `model` into directory `dir` (created if needed).
pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut text = String::new();
    let _ = writeln!(text, "format_version = {}", meta.format_version);
    let _ = writeln!(text, "step = {}", meta.step);
    let _ = writeln!(text, "epoch = {}", meta.epoch);
    let _ = writeln!(text, "score_low = {}", model.score_scale.low);
    let _ = writeln!(text, "score_high = {}", model.score_scale.high);
    for (k, v) in model_pairs(model.config()) {
        let _ = writeln!(text, "{k} = {v}");
    }
    for (k, v) in meta.config.iter().filter(|(k, _)| !is_model_key(k)) {
        let _ = writeln!(text, "{k} = {v}");
    }

    let mut blob = Vec::new();
    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    for (_, p) in model.store.iter() {
        let offset = blob.len();
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let shape: Vec<String> = p.value.shape().iter().map(ToString::to_string).collect();
        let _ = writeln!(index, "{},{},{},{}", p.name, shape.join("x"), offset, blob.len() - offset);
    }

    for (name, bytes) in [
        (META_FILE, text.as_bytes()),
        (INDEX_FILE, index.as_bytes()),
        (TENSORS_FILE, blob.as_slice()),
    ] {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn parse_meta(path: &Path, text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ckpt_err(path, format!("line {}: expected `key = value`", i + 1)))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(ckpt_err(path, format!("line {}: duplicate key {}", i + 1, k.trim())));
        }
    }
    Ok(map)
}

fn field<T: std::str::FromStr>(path: &Path, map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    map.get(key)
        .ok_or_else(|| ckpt_err(path, format!("missing {key}")))?
        .parse()
        .map_err(|_| ckpt_err(path, format!("bad value for {key}")))
}

/// Loads a checkpoint directory. Either the whole model is restored or an
/// error is returned; nothing partial escapes.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
    let dir = dir.as_ref();
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let meta_path = dir.join(META_FILE);
    let meta_text = String::from_utf8(read(META_FILE)?).map_err(|_| ckpt_err(&meta_path, "not UTF-8"))?;
    let map = parse_meta(&meta_path, &meta_text)?;
    let version: u32 = field(&meta_path, &map, "format_version")?;
    if version != FORMAT_VERSION {
        return Err(ckpt_err(
            &meta_path,
            format!("format version {version} is not supported (expected {FORMAT_VERSION})"),
        ));
    }
    let step: usize = field(&meta_path, &map, "step")?;
    let epoch: usize = field(&meta_path, &map, "epoch")?;
    let score_scale = ScoreScale::new(
        field(&meta_path, &map, "score_low")?,
        field(&meta_path, &map, "score_high")?,
    );
    let model_config = model_config_from_pairs(map.iter().map(|(k, v)| (k.as_str(), v.as_str())))
        .map_err(|e| ckpt_err(&meta_path, e))?;
    let mut model = Model::new(&model_config).map_err(|e| ckpt_err(&meta_path, e))?;
    model.score_scale = score_scale;

    let blob = read(TENSORS_FILE)?;
    let index_path = dir.join(INDEX_FILE);
    let index = String::from_utf8(read(INDEX_FILE)?).map_err(|_| ckpt_err(&index_path, "not UTF-8"))?;
    let mut lines = index.lines();
    if lines.next() != Some(INDEX_HEADER) {
        return Err(ckpt_err(&index_path, format!("header must be `{INDEX_HEADER}`")));
    }
    let mut values: Vec<Option<Tensor<f32>>> = vec![None; model.store.len()];
    let mut seen = HashSet::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let at = |msg: String| ckpt_err(&index_path, format!("line {}: {msg}", i + 2));
        let cols: Vec<&str> = line.split(',').collect();
        let [name, shape, offset, length] = cols[..] else {
            return Err(at(format!("expected 4 columns, got {}", cols.len())));
        };
        let shape: Vec<usize> = shape
            .split('x')
            .map(|d| d.parse().map_err(|_| at(format!("bad shape {shape:?}"))))
            .collect::<Result<_>>()?;
        let offset: usize = offset.parse().map_err(|_| at(format!("bad offset {offset:?}")))?;
        let length: usize = length.parse().map_err(|_| at(format!("bad length {length:?}")))?;
        let id = model
            .store
            .find(name)
            .ok_or_else(|| at(format!("unknown parameter {name}")))?;
        if !seen.insert(id) {
            return Err(at(format!("parameter {name} appears twice")));
        }
        let expected = model.store.value(id).shape();
        if shape != expected {
            return Err(at(format!("{name}: shape {shape:?} does not match model {expected:?}")));
        }
        let numel: usize = shape.iter().product();
        if length != numel * 4 {
            return Err(at(format!("{name}: length {length} != 4 * {numel}")));
        }
        let bytes = offset
            .checked_add(length)
            .and_then(|end| blob.get(offset..end))
            .ok_or_else(|| at(format!("{name}: range {offset}+{length} exceeds {} bytes", blob.len())))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        values[id.index()] = Some(Tensor::from_vec(&shape, data)?);
    }
    if let Some((_, p)) = model.store.iter().find(|(id, _)| !seen.contains(id)) {
        return Err(ckpt_err(&index_path, format!("parameter {} is missing", p.name)));
    }
    for (p, v) in model.store.iter_mut().zip(values) {
        p.value = v.expect("every parameter checked above");
    }
    let config = map
        .into_iter()
        .filter(|(k, _)| !matches!(k.as_str(), "format_version" | "step" | "epoch" | "score_low" | "score_high"))
        .collect();
    Ok((
        model,
        CheckpointMeta {
            format_version: version,
            step,
            epoch,
            config,
        },
    ))
}
