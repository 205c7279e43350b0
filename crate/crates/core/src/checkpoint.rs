//! Binary checkpoints: an 8-byte little-endian header length, a JSON header, then raw
//! little-endian `f64` arrays in header order.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Domain, Field, FieldKind, Lattice};
use crate::C64;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    /// Number of `f64` values (complex arrays store interleaved re/im).
    pub len: usize,
    /// Complex field on the header's grid if set.
    pub field_kind: Option<FieldKind>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub lattice: Lattice,
    pub dims: [usize; 3],
    pub ecut: Option<f64>,
    /// Free-form run metadata.
    pub meta: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

pub struct Checkpoint {
    pub header: Header,
    pub data: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(domain: &Domain, ecut: Option<f64>, meta: serde_json::Value) -> Self {
        Checkpoint {
            header: Header { version: FORMAT_VERSION, lattice: domain.lattice.clone(), dims: domain.dims, ecut, meta, arrays: vec![] },
            data: vec![],
        }
    }

    pub fn push_field(&mut self, name: &str, f: &Field) {
        let mut v = Vec::with_capacity(2 * f.coeffs.len());
        for c in &f.coeffs {
            v.push(c.re);
            v.push(c.im);
        }
        self.push(name, v, Some(f.kind));
    }

    pub fn push(&mut self, name: &str, values: Vec<f64>, field_kind: Option<FieldKind>) {
        self.header.arrays.push(ArrayEntry { name: name.into(), len: values.len(), field_kind });
        self.data.push(values);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.header.arrays.iter().position(|a| a.name == name).map(|i| self.data[i].as_slice())
    }

    /// Rebuild a stored field on a fresh domain described by the header.
    pub fn field(&self, name: &str) -> Result<Field> {
        let i = self
            .header
            .arrays
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no array {name:?}")))?;
        let kind = self.header.arrays[i]
            .field_kind
            .ok_or_else(|| Error::Config(format!("array {name:?} is not a field")))?;
        let domain: Arc<Domain> = Domain::new(self.header.lattice.clone(), self.header.dims);
        let raw = &self.data[i];
        if raw.len() != 2 * domain.len() {
            return Err(Error::Config(format!("array {name:?} has {} values for a grid of {}", raw.len(), domain.len())));
        }
        let coeffs = raw.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect();
        Ok(Field::from_coeffs(&domain, coeffs, kind))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for arr in &self.data {
            for x in arr {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let mut hbytes = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut hbytes)?;
        let header: Header = serde_json::from_slice(&hbytes).map_err(|e| Error::Config(format!("bad checkpoint header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Config(format!("checkpoint version {} unsupported", header.version)));
        }
        let mut data = Vec::with_capacity(header.arrays.len());
        for a in &header.arrays {
            let mut bytes = vec![0u8; 8 * a.len];
            input.read_exact(&mut bytes)?;
            data.push(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect());
        }
        Ok(Checkpoint { header, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::gaussian_density;
    use nalgebra::Vector3;

    #[test]
    fn field_survives_disk() {
        let d = Domain::new(Lattice::cubic(7.0), [6, 8, 10]);
        let f = gaussian_density(&d, Vector3::new(1.0, 2.0, 3.0), 0.8, 1.5).translated(Vector3::new(0.3, 0.0, 0.1));
        let mut c = Checkpoint::new(&d, Some(0.6), serde_json::json!({"what": "test"}));
        c.push_field("rho", &f);
        c.push("extra", vec![1.0, -2.5], None);
        let dir = std::env::temp_dir().join(format!("polaron-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.bin");
        c.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        let g = back.field("rho").unwrap();
        assert!(g.domain.same_as(&d));
        assert_eq!(g.coeffs, f.coeffs);
        assert_eq!(back.get("extra").unwrap(), &[1.0, -2.5]);
        assert_eq!(back.header.meta["what"], "test");
        assert!(back.field("extra").is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
