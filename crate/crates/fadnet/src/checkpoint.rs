//! Checkpoint container: a plain-text manifest plus a binary payload.
//!
//! The manifest has one line per tensor, three whitespace-separated fields:
//!
//! ```text
//! <name> <d0>x<d1>x...x<dn> <byte_offset>
//! ```
//!
//! The payload file concatenates each tensor's values as little-endian
//! 64-bit floats at its stated byte offset, in manifest order. Offsets are
//! `8 * (running value count)`; the payload length must equal the total.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_EXT: &str = "manifest";
pub const PAYLOAD_EXT: &str = "bin";

/// Write `entries` as `<stem>.manifest` + `<stem>.bin` under `dir`.
pub fn save(dir: &Path, stem: &str, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in entries {
        if name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("tensor name `{name}` contains whitespace")));
        }
        let dims: Vec<String> = tensor.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name} {} {}\n", dims.join("x"), payload.len()));
        for v in tensor.values() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(format!("{stem}.{MANIFEST_EXT}")), manifest)?;
    fs::write(dir.join(format!("{stem}.{PAYLOAD_EXT}")), payload)?;
    Ok(())
}

/// Read a checkpoint written by [`save`].
pub fn load(dir: &Path, stem: &str) -> Result<BTreeMap<String, Tensor>> {
    let manifest = fs::read_to_string(dir.join(format!("{stem}.{MANIFEST_EXT}")))?;
    let payload = fs::read(dir.join(format!("{stem}.{PAYLOAD_EXT}")))?;
    let mut entries = BTreeMap::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Checkpoint(format!(
                "manifest line {}: expected `name shape offset`, got `{line}`",
                lineno + 1
            )));
        }
        let name = fields[0].to_string();
        let shape: Vec<usize> = fields[1]
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|_| Error::Checkpoint(format!("bad shape `{}`", fields[1]))))
            .collect::<Result<_>>()?;
        let offset: usize = fields[2]
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad offset `{}`", fields[2])))?;
        let numel: usize = shape.iter().product();
        let end = offset + 8 * numel;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "`{name}` extends to byte {end} but payload has {}",
                payload.len()
            )));
        }
        let values: Vec<f64> = payload[offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if entries.insert(name.clone(), Tensor::from_vec(shape, values)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = BTreeMap::new();
        entries.insert(
            "a.weight".to_string(),
            Tensor::from_vec(vec![2, 3], vec![1.5, -0.25, 1e-300, f64::MIN_POSITIVE, 0.0, -7.75]).unwrap(),
        );
        entries.insert("b.bias".to_string(), Tensor::from_vec(vec![1], vec![std::f64::consts::PI]).unwrap());
        save(dir.path(), "model", &entries).unwrap();
        let loaded = load(dir.path(), "model").unwrap();
        assert_eq!(loaded.len(), 2);
        for (name, tensor) in &entries {
            let got = &loaded[name];
            assert_eq!(got.shape(), tensor.shape());
            for (a, b) in got.values().iter().zip(tensor.values()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn manifest_offsets_are_byte_positions() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = BTreeMap::new();
        entries.insert("x".to_string(), Tensor::zeros(vec![4]));
        entries.insert("y".to_string(), Tensor::zeros(vec![2, 2]));
        save(dir.path(), "ck", &entries).unwrap();
        let manifest = std::fs::read_to_string(dir.path().join("ck.manifest")).unwrap();
        assert_eq!(manifest, "x 4 0\ny 2x2 32\n");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = BTreeMap::new();
        entries.insert("x".to_string(), Tensor::zeros(vec![8]));
        save(dir.path(), "ck", &entries).unwrap();
        let payload_path = dir.path().join("ck.bin");
        let bytes = std::fs::read(&payload_path).unwrap();
        std::fs::write(&payload_path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load(dir.path(), "ck"), Err(Error::Checkpoint(_))));
    }
}
