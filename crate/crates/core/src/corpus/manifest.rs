//! Utterance records and the on-disk manifest format.
//!
//! A manifest is a UTF-8 text file. The first line is a header object
//! `{"schema_version":1}`; every following line is one JSON record:
//!
//! ```text
//! {"id":"utt-00001","features_path":"features/utt-00001.feat","transcript":"stone river",
//!  "group_id":"utt-g0000","hotwords":["zorvex"],"summary":null,"distractor_count":0,"snr_db":null}
//! ```
//!
//! Optional fields are written as `null` when absent. `features_path` is
//! relative to the manifest's directory. Feature files are little-endian:
//! magic `FEAT`, `u32` format version, `u32` rows, `u32` cols, `f64` frame
//! shift in ms, then `rows·cols` `f32` values in row-major order.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::FeatureMatrix;
use crate::contextforge::ContextBundle;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
const FEAT_MAGIC: &[u8; 4] = b"FEAT";
const FEAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: FeatureMatrix,
    pub transcript: String,
    pub group_id: Option<String>,
    pub context: Option<ContextBundle>,
    pub snr_db: Option<f64>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, features: FeatureMatrix, transcript: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            features,
            transcript: transcript.into(),
            group_id: None,
            context: None,
            snr_db: None,
        }
    }

    /// Copy with the context removed.
    pub fn without_context(&self) -> Self {
        Self {
            context: None,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    entries: Vec<Utterance>,
    schema_version: u32,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    features_path: String,
    transcript: String,
    group_id: Option<String>,
    hotwords: Option<Vec<String>>,
    summary: Option<String>,
    #[serde(default)]
    distractor_count: Option<usize>,
    snr_db: Option<f64>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.')
}

impl Manifest {
    pub fn new(entries: Vec<Utterance>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !valid_id(&e.id) {
                return Err(Error::Manifest(format!(
                    "utterance id `{}` must be non-empty ASCII [A-Za-z0-9._-]",
                    e.id
                )));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate utterance id `{}`", e.id)));
            }
        }
        Ok(Self {
            entries,
            schema_version: SCHEMA_VERSION,
        })
    }

    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
            schema_version: SCHEMA_VERSION,
        }
    }

    pub fn entries(&self) -> &[Utterance] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<Utterance> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn schema_version(&self) -> u32 {
        self.schema_version
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.entries.iter().find(|u| u.id == id)
    }

    /// Writes `path` plus one feature file per utterance under
    /// `<manifest dir>/features/`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let feat_dir = dir.join("features");
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = serde_json::to_string(&Header {
            schema_version: self.schema_version,
        })
        .expect("header serializes");
        writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
        for u in &self.entries {
            let rel = format!("features/{}.feat", u.id);
            write_features(&dir.join(&rel), &u.features)?;
            let rec = Record {
                id: u.id.clone(),
                features_path: rel,
                transcript: u.transcript.clone(),
                group_id: u.group_id.clone(),
                hotwords: u.context.as_ref().map(|c| c.hotwords().to_vec()),
                summary: u.context.as_ref().and_then(|c| c.summary().map(str::to_owned)),
                distractor_count: u.context.as_ref().map(ContextBundle::distractor_count),
                snr_db: u.snr_db,
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Manifest(format!("{} is empty", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_str(&header_line)
            .map_err(|e| Error::Manifest(format!("bad header line: {e}")))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                header.schema_version
            )));
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("line {}: {e}", n + 2)))?;
            let features = read_features(&resolve(&dir, &rec.features_path))?;
            let context = if rec.hotwords.is_some() || rec.summary.is_some() {
                let hotwords = rec.hotwords.unwrap_or_default();
                let dc = rec.distractor_count.unwrap_or(0);
                if dc > hotwords.len() {
                    return Err(Error::Manifest(format!(
                        "line {}: distractor_count exceeds hotword count",
                        n + 2
                    )));
                }
                Some(ContextBundle::from_parts_unchecked(hotwords, rec.summary, dc))
            } else {
                None
            };
            entries.push(Utterance {
                id: rec.id,
                features,
                transcript: rec.transcript,
                group_id: rec.group_id,
                context,
                snr_db: rec.snr_db,
            });
        }
        Manifest::new(entries)
    }
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

pub fn write_features(path: &Path, f: &FeatureMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + f.data().len() * 4);
    buf.extend_from_slice(FEAT_MAGIC);
    buf.extend_from_slice(&FEAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(f.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(f.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&f.frame_shift_ms().to_le_bytes());
    for v in f.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Manifest(format!("{}: {msg}", path.display()));
    if bytes.len() < 24 || &bytes[..4] != FEAT_MAGIC {
        return Err(bad("not a feature file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(4) != FEAT_VERSION {
        return Err(bad("unsupported feature file version"));
    }
    let (rows, cols) = (u32_at(8) as usize, u32_at(12) as usize);
    let shift = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if bytes.len() != 24 + rows * cols * 4 {
        return Err(bad("truncated payload"));
    }
    let data = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(rows, cols, data, shift)
}
