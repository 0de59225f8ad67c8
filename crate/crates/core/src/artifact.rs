//! On-disk artifacts: provenance fingerprints, the versioned JSON model
//! envelope and CSV files with `#`-prefixed provenance header lines.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::GATE_ORDER;

pub const MODEL_FORMAT: &str = "lstm-nmpc-model";
pub const MODEL_VERSION: u32 = 1;

/// Hex SHA-256 of `bytes`.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Fingerprint of any serializable value via its canonical JSON encoding.
pub fn fingerprint_of<T: Serialize>(value: &T) -> String {
    fingerprint(&serde_json::to_vec(value).expect("serializable value"))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_fingerprint: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_fingerprint: impl Into<String>, seed: u64) -> Self {
        Provenance {
            config_fingerprint: config_fingerprint.into(),
            seed,
        }
    }

    pub fn header_lines(&self) -> Vec<String> {
        vec![
            format!("config_fingerprint: {}", self.config_fingerprint),
            format!("seed: {}", self.seed),
        ]
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    kind: String,
    gate_order: String,
    provenance: Provenance,
    body: T,
}

pub fn write_model<T: Serialize>(path: &Path, kind: &str, provenance: &Provenance, body: &T) -> Result<()> {
    let env = Envelope {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        kind: kind.to_string(),
        gate_order: GATE_ORDER.to_string(),
        provenance: provenance.clone(),
        body,
    };
    let text = serde_json::to_string_pretty(&env).map_err(|e| Error::ModelFormat {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    write_text(path, &text)
}

/// Reads a model envelope, checking format, version, kind and gate order.
pub fn read_model<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<(T, Provenance)> {
    let text = read_text(path)?;
    let bad = |reason: String| Error::ModelFormat {
        path: path.display().to_string(),
        reason,
    };
    let env: Envelope<T> = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if env.format != MODEL_FORMAT {
        return Err(bad(format!("unexpected format `{}`", env.format)));
    }
    if env.version != MODEL_VERSION {
        return Err(bad(format!("unsupported version {}", env.version)));
    }
    if env.kind != kind {
        return Err(bad(format!("expected a `{kind}` model, found `{}`", env.kind)));
    }
    if env.gate_order != GATE_ORDER {
        return Err(bad(format!("gate order `{}` is not `{GATE_ORDER}`", env.gate_order)));
    }
    Ok((env.body, env.provenance))
}

pub fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Numeric table with a header row, written as CSV preceded by `# ` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub comments: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            comments: Vec::new(),
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Data(format!("missing column `{name}`")))?;
        Ok(self.rows.iter().map(|r| r[idx]).collect())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.comments {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            // `{}` on f64 prints the shortest round-tripping representation
            w.write_record(row.iter().map(|v| format!("{v}")))?;
        }
        let body = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        out.push_str(&String::from_utf8(body).expect("ascii csv"));
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv()?)
    }

    pub fn parse(text: &str) -> Result<Table> {
        let comments = text
            .lines()
            .take_while(|l| l.starts_with('#'))
            .map(|l| l.trim_start_matches('#').trim().to_string())
            .collect();
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let columns: Vec<String> = r.headers()?.iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::Data(format!("row {}: cannot parse `{f}` as a number", line + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != columns.len() {
                return Err(Error::Data(format!("row {}: expected {} fields", line + 1, columns.len())));
            }
            rows.push(row);
        }
        Ok(Table { comments, columns, rows })
    }

    pub fn read(path: &Path) -> Result<Table> {
        Table::parse(&read_text(path)?)
    }

    /// Value of a `key: value` comment line, if present.
    pub fn comment_value(&self, key: &str) -> Option<&str> {
        self.comments.iter().find_map(|c| {
            let (k, v) = c.split_once(':')?;
            (k.trim() == key).then(|| v.trim())
        })
    }
}
