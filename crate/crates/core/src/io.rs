//! Lattice files: a flat little-endian `f64` payload plus a JSON sidecar
//! header. Values are time-major, row-major over space, with vector
//! components innermost.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LatticeGrid, ScalarLattice, VectorLattice};

pub const FORMAT: &str = "morrey-lab-lattice";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeHeader {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub endianness: String,
    pub order: String,
    /// `[n_time, n_space, ..., n_space, components]`.
    pub shape: Vec<usize>,
    pub components: usize,
    pub grid: LatticeGrid,
    /// Hash of the run configuration that produced the payload.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl LatticeHeader {
    pub fn new(grid: &LatticeGrid, components: usize) -> Self {
        let mut shape = vec![grid.n_time()];
        shape.extend(std::iter::repeat_n(grid.n_space(), grid.dim));
        shape.push(components);
        Self {
            format: FORMAT.into(),
            version: 1,
            dtype: "f64".into(),
            endianness: "little".into(),
            order: "time-major, row-major, components innermost".into(),
            shape,
            components,
            grid: grid.clone(),
            config_hash: None,
        }
    }

    fn check(&self) -> Result<()> {
        if self.format != FORMAT || self.dtype != "f64" || self.endianness != "little" {
            return Err(Error::Config(format!(
                "unsupported lattice header ({}, {}, {})",
                self.format, self.dtype, self.endianness
            )));
        }
        self.grid.validate()?;
        if self.shape != Self::new(&self.grid, self.components).shape {
            return Err(Error::Shape(format!("header shape {:?} disagrees with its grid", self.shape)));
        }
        Ok(())
    }
}

/// Sidecar path for a payload: `b.f64` -> `b.json`.
pub fn sidecar_path(payload: &Path) -> PathBuf {
    payload.with_extension("json")
}

pub fn encode_f64(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f64(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Shape(format!("payload of {} bytes is not a whole number of f64", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
}

fn write_raw(path: &Path, header: &LatticeHeader, values: &[f64]) -> Result<()> {
    fs::write(path, encode_f64(values))?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(header)? + "\n")?;
    Ok(())
}

fn read_raw(path: &Path) -> Result<(LatticeHeader, Vec<f64>)> {
    let header: LatticeHeader = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    header.check()?;
    let values = decode_f64(&fs::read(path)?)?;
    let expected = header.grid.len() * header.components;
    if values.len() != expected {
        return Err(Error::Shape(format!("payload has {} values, header implies {expected}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite entry in {}", path.display())));
    }
    Ok((header, values))
}

pub fn write_scalar_lattice(path: &Path, lattice: &ScalarLattice) -> Result<()> {
    write_raw(path, &LatticeHeader::new(&lattice.grid, 1), &lattice.values)
}

/// Scalar lattice whose sidecar records the producing configuration's hash.
pub fn write_scalar_lattice_tagged(path: &Path, lattice: &ScalarLattice, config_hash: &str) -> Result<()> {
    let header = LatticeHeader { config_hash: Some(config_hash.into()), ..LatticeHeader::new(&lattice.grid, 1) };
    write_raw(path, &header, &lattice.values)
}

pub fn read_lattice_header(path: &Path) -> Result<LatticeHeader> {
    let header: LatticeHeader = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    header.check()?;
    Ok(header)
}

pub fn write_vector_lattice(path: &Path, lattice: &VectorLattice) -> Result<()> {
    write_raw(path, &LatticeHeader::new(&lattice.grid, lattice.dim()), &lattice.values)
}

pub fn read_scalar_lattice(path: &Path) -> Result<ScalarLattice> {
    let (header, values) = read_raw(path)?;
    if header.components != 1 {
        return Err(Error::Shape(format!("expected a scalar lattice, found {} components", header.components)));
    }
    ScalarLattice::from_values(&header.grid, values)
}

pub fn read_vector_lattice(path: &Path) -> Result<VectorLattice> {
    let (header, values) = read_raw(path)?;
    if header.components != header.grid.dim {
        return Err(Error::Shape(format!("expected {} components, found {}", header.grid.dim, header.components)));
    }
    VectorLattice::from_values(&header.grid, values)
}
