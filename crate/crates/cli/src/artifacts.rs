use std::fs;
use std::path::{Path, PathBuf};

use morrey_lab::io::{sidecar_path, write_scalar_lattice_tagged};
use morrey_lab::lattice::ScalarLattice;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const DICTIONARY: &str = "data_dictionary.csv";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the config with its output location removed, over canonical
/// (sorted-key, compact) JSON.
pub fn config_hash(config: &Value) -> String {
    let mut v = config.clone();
    if let Some(map) = v.as_object_mut() {
        map.remove("output");
        map.remove("run_dir");
    }
    sha256_hex(&serde_json::to_vec(&v).expect("JSON value serializes"))
}

/// Shortest round-trip decimal.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        ryu::Buffer::new().format_finite(v).to_string()
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub enum Cell {
    F(f64),
    I(i64),
    S(String),
    B(bool),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::I(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::B(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::S(v.into())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::S(v)
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::F(v) => fmt_f64(*v),
            Cell::I(v) => v.to_string(),
            Cell::S(s) => s.clone(),
            Cell::B(b) => b.to_string(),
        }
    }
}

/// A CSV table plus the column descriptions that go into the data dictionary.
pub struct Table {
    pub name: String,
    pub columns: Vec<(&'static str, &'static str)>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: Vec<(&'static str, &'static str)>) -> Self {
        Self { name: name.into(), columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub command: String,
    pub versions: Value,
    pub seeds: Vec<u64>,
    pub config: Value,
    pub artifacts: Vec<ArtifactEntry>,
}

pub fn versions() -> Value {
    serde_json::json!({
        "morrey-lab": morrey_lab::VERSION,
        "morrey-lab-cli": env!("CARGO_PKG_VERSION"),
    })
}

/// Output directory owned by one configuration.
pub struct RunDir {
    pub dir: PathBuf,
    pub hash: String,
    artifacts: Vec<ArtifactEntry>,
    dictionary: Vec<(String, String, String)>,
}

impl RunDir {
    pub fn open(dir: &Path, hash: &str) -> Result<Self, CliError> {
        let manifest = dir.join(MANIFEST);
        if manifest.exists() {
            let m: Manifest = serde_json::from_slice(&fs::read(&manifest)?)
                .map_err(|e| CliError::Schema(format!("unreadable manifest in {}: {e}", dir.display())))?;
            if m.config_hash != hash {
                return Err(CliError::Schema(format!(
                    "{} belongs to another configuration (hash {})",
                    dir.display(),
                    m.config_hash
                )));
            }
        }
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.into(), hash: hash.into(), artifacts: Vec::new(), dictionary: Vec::new() })
    }

    fn record(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        fs::write(self.dir.join(name), bytes)?;
        self.artifacts.push(ArtifactEntry { path: name.into(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    /// JSON object artifact with the config hash inserted.
    pub fn json(&mut self, name: &str, value: Value) -> Result<(), CliError> {
        let mut value = value;
        match value.as_object_mut() {
            Some(map) => {
                map.insert("config_hash".into(), Value::String(self.hash.clone()));
            }
            None => value = serde_json::json!({ "config_hash": self.hash, "data": value }),
        }
        let mut bytes = serde_json::to_vec_pretty(&value).expect("JSON value serializes");
        bytes.push(b'\n');
        self.record(name, &bytes)
    }

    /// CSV artifact with a trailing `config_hash` column.
    pub fn csv(&mut self, table: &Table) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<&str> = table.columns.iter().map(|c| c.0).collect();
        header.push("config_hash");
        w.write_record(&header).map_err(csv_err)?;
        for row in &table.rows {
            let mut rec: Vec<String> = row.iter().map(Cell::render).collect();
            rec.push(self.hash.clone());
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
        let name = format!("{}.csv", table.name);
        for (col, desc) in &table.columns {
            self.dictionary.push((name.clone(), (*col).into(), (*desc).into()));
        }
        self.dictionary.push((name.clone(), "config_hash".into(), "sha256 of the run configuration".into()));
        self.record(&name, &bytes)
    }

    pub fn lattice(&mut self, name: &str, lattice: &ScalarLattice) -> Result<(), CliError> {
        let payload = self.dir.join(format!("{name}.f64"));
        write_scalar_lattice_tagged(&payload, lattice, &self.hash)?;
        for p in [payload.clone(), sidecar_path(&payload)] {
            let bytes = fs::read(&p)?;
            let file = p.file_name().expect("file name").to_string_lossy().into_owned();
            self.artifacts.push(ArtifactEntry { path: file, sha256: sha256_hex(&bytes) });
        }
        Ok(())
    }

    /// Writes the data dictionary and the manifest; consumes the run.
    pub fn finish(mut self, command: &str, config: &Value, seeds: Vec<u64>) -> Result<(), CliError> {
        if !self.dictionary.is_empty() {
            let mut t = Table::new(
                "data_dictionary",
                vec![("file", "CSV file name"), ("column", "column name"), ("description", "meaning and units")],
            );
            let entries = std::mem::take(&mut self.dictionary);
            for (f, c, d) in entries {
                t.push(vec![f.into(), c.into(), d.into()]);
            }
            self.csv(&t)?;
            // the dictionary describes itself only through its header
            self.dictionary.clear();
        }
        let manifest = Manifest {
            config_hash: self.hash.clone(),
            command: command.into(),
            versions: versions(),
            seeds,
            config: config.clone(),
            artifacts: self.artifacts.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        bytes.push(b'\n');
        fs::write(self.dir.join(MANIFEST), bytes)?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}
