//! Named tensors stored as a little-endian float32 data file plus a text
//! manifest (`<data>.manifest`) listing `name offset_bytes dims...`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorSpec};

const MANIFEST_HEADER: &str = "hpblob 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Blob {
    entries: Vec<(String, Tensor)>,
}

impl Blob {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn manifest_path(data: &Path) -> PathBuf {
        let mut s = data.as_os_str().to_owned();
        s.push(".manifest");
        PathBuf::from(s)
    }

    /// Serialized (manifest, data) pair.
    pub fn to_parts(&self) -> (String, Vec<u8>) {
        let mut manifest = String::from(MANIFEST_HEADER);
        manifest.push('\n');
        let mut data = Vec::new();
        for (name, t) in &self.entries {
            let dims: Vec<String> = t.dims().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(manifest, "{} {} {}", name, data.len(), dims.join(" "));
            data.extend_from_slice(&t.to_le_bytes());
        }
        (manifest, data)
    }

    pub fn from_parts(manifest: &str, data: &[u8]) -> Result<Self> {
        let mut lines = manifest
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, h)) if h == MANIFEST_HEADER => {}
            Some((n, h)) => {
                return Err(Error::parse(
                    n,
                    format!("expected '{}', got '{}'", MANIFEST_HEADER, h),
                ))
            }
            None => return Err(Error::parse(1, "empty blob manifest")),
        }
        let mut blob = Blob::new();
        for (n, line) in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < 3 {
                return Err(Error::parse(n, "expected: name offset dims..."));
            }
            let offset: usize = toks[1].parse().map_err(|_| Error::parse(n, "bad offset"))?;
            let dims = toks[2..]
                .iter()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| Error::parse(n, format!("bad dim '{}'", t)))
                })
                .collect::<Result<Vec<_>>>()?;
            let spec = TensorSpec::new(dims)?;
            let end = offset + spec.numel() * 4;
            if end > data.len() {
                return Err(Error::parse(
                    n,
                    format!(
                        "entry {} needs bytes {}..{} but data has {}",
                        toks[0],
                        offset,
                        end,
                        data.len()
                    ),
                ));
            }
            blob.push(toks[0], Tensor::from_le_bytes(spec, &data[offset..end])?);
        }
        Ok(blob)
    }

    pub fn write(&self, data_path: &Path) -> Result<()> {
        let (manifest, data) = self.to_parts();
        fs::write(data_path, data)?;
        fs::write(Self::manifest_path(data_path), manifest)?;
        Ok(())
    }

    pub fn read(data_path: &Path) -> Result<Self> {
        let data = fs::read(data_path)?;
        let manifest = fs::read_to_string(Self::manifest_path(data_path))?;
        Self::from_parts(&manifest, &data)
    }
}

/// Writes a single tensor under `name`.
pub fn write_tensor(path: &Path, name: &str, t: &Tensor) -> Result<()> {
    let mut b = Blob::new();
    b.push(name, t.clone());
    b.write(path)
}

/// Reads the first tensor of a blob.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let b = Blob::read(path)?;
    b.entries
        .into_iter()
        .next()
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Invalid(format!("{} holds no tensors", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parts_round_trip() {
        let mut b = Blob::new();
        b.push(
            "a",
            Tensor::from_dims(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, -0.0, 7.25]).unwrap(),
        );
        b.push(
            "b",
            Tensor::from_dims(&[1], vec![f32::MIN_POSITIVE]).unwrap(),
        );
        let (m, d) = b.to_parts();
        assert!(m.contains("b 24 1"));
        let back = Blob::from_parts(&m, &d).unwrap();
        assert!(back.get("a").unwrap().bit_eq(b.get("a").unwrap()));
        assert!(back.get("b").unwrap().bit_eq(b.get("b").unwrap()));
    }

    #[test]
    fn truncated_data_rejected() {
        let mut b = Blob::new();
        b.push("a", Tensor::from_dims(&[4], vec![1.0; 4]).unwrap());
        let (m, d) = b.to_parts();
        assert!(Blob::from_parts(&m, &d[..10]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let t = Tensor::from_dims(&[1, 2, 2], vec![0.5, 1.5, 2.5, 3.5]).unwrap();
        write_tensor(&p, "input", &t).unwrap();
        assert!(read_tensor(&p).unwrap().bit_eq(&t));
    }
}
