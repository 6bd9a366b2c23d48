//! Named-tensor checkpoint files and plain-text matrices.
//!
//! A checkpoint is line oriented:
//!
//! ```text
//! nodediffrec-checkpoint 1
//! meta kind injection_vae
//! tensor enc.feat.w 64 128
//! <64 lines of 128 values>
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so a
//! save/load cycle reproduces every `f64` bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::nn::Mat;
use crate::{Error, Result};

const MAGIC: &str = "nodediffrec-checkpoint 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut ck = Self::default();
        ck.meta.insert("kind".into(), kind.into());
        ck
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: &Mat) {
        self.tensors.push((name.into(), tensor.clone()));
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("meta `{key}` = `{raw}` does not parse")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.meta("kind")? {
            k if k == kind => Ok(()),
            other => Err(Error::Checkpoint(format!("expected kind `{kind}`, found `{other}`"))),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<Mat> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, t) in &self.tensors {
            let _ = writeln!(out, "tensor {name} {} {}", t.nrows(), t.ncols());
            write_rows(&mut out, t);
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Checkpoint(format!("{}: bad magic line", path.display())));
        }
        let mut ck = Checkpoint::default();
        while let Some(line) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("meta"), Some(k), v) => {
                    ck.meta.insert(k.into(), v.unwrap_or("").into());
                }
                (Some("tensor"), Some(name), Some(dims)) => {
                    let (rows, cols) = parse_dims(dims)?;
                    let tensor = read_rows(&mut lines, rows, cols)?;
                    ck.tensors.push((name.into(), tensor));
                }
                _ => return Err(Error::Checkpoint(format!("unexpected line `{line}`"))),
            }
        }
        Ok(ck)
    }
}

fn parse_dims(dims: &str) -> Result<(usize, usize)> {
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    match (it.next(), it.next()) {
        (Some(Ok(r)), Some(Ok(c))) => Ok((r, c)),
        _ => Err(Error::Checkpoint(format!("bad dims `{dims}`"))),
    }
}

fn write_rows(out: &mut String, t: &Mat) {
    for row in t.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
}

fn read_rows<'a, I: Iterator<Item = &'a str>>(lines: &mut I, rows: usize, cols: usize) -> Result<Mat> {
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("truncated tensor at row {r}")))?;
        let before = data.len();
        for tok in line.split_whitespace() {
            data.push(
                tok.parse::<f64>()
                    .map_err(|_| Error::Checkpoint(format!("bad value `{tok}`")))?,
            );
        }
        if data.len() - before != cols {
            return Err(Error::Checkpoint(format!(
                "row {r} has {} values, expected {cols}",
                data.len() - before
            )));
        }
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Writes a text matrix with a `rows cols` header.
pub fn save_matrix(path: &Path, m: &Mat) -> Result<()> {
    let mut out = format!("{} {}\n", m.nrows(), m.ncols());
    write_rows(&mut out, m);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<Mat> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Checkpoint(format!("{}: empty matrix file", path.display())))?;
    let (rows, cols) = parse_dims(header)?;
    read_rows(&mut lines, rows, cols)
}

const SCORE_MAGIC: &[u8; 8] = b"NDRSCORE";

/// Dense little-endian score matrix: 8-byte magic, `rows` and `cols` as
/// `u64`, then `rows * cols` `f64` values in row-major order.
pub fn save_scores_binary(path: &Path, m: &Mat) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + m.len() * 8);
    buf.extend_from_slice(SCORE_MAGIC);
    buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_scores_binary(path: &Path) -> Result<Mat> {
    let buf = fs::read(path)?;
    if buf.len() < 24 || &buf[..8] != SCORE_MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a score matrix", path.display())));
    }
    let word = |k: usize| u64::from_le_bytes(buf[k..k + 8].try_into().unwrap()) as usize;
    let (rows, cols) = (word(8), word(16));
    if buf.len() != 24 + rows * cols * 8 {
        return Err(Error::Checkpoint("score matrix length mismatch".into()));
    }
    let data = buf[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use crate::stream_rng;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = stream_rng(9, 0);
        let mut ck = Checkpoint::new("toy");
        ck.set_meta("T", 100);
        ck.push("a", &randn(3, 4, 1.0, &mut rng));
        ck.push("b", &Array2::from_elem((1, 2), f64::MIN_POSITIVE));
        let path = dir.path().join("toy.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta_parse::<usize>("T").unwrap(), 100);
        assert!(back.expect_kind("other").is_err());
    }

    #[test]
    fn text_and_binary_matrices_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = randn(5, 2, 3.0, &mut stream_rng(2, 0));
        save_matrix(&dir.path().join("m.txt"), &m).unwrap();
        assert_eq!(load_matrix(&dir.path().join("m.txt")).unwrap(), m);
        save_scores_binary(&dir.path().join("m.bin"), &m).unwrap();
        assert_eq!(load_scores_binary(&dir.path().join("m.bin")).unwrap(), m);
    }
}
