//! Versioned textual checkpoint format with named weight blocks.
//!
//! Layout (line oriented):
//!
//! ```text
//! lightn-checkpoint v1
//! meta <key> <value>
//! block <name> <rows> <cols>
//! <cols hex-encoded f64 words per row, space separated>
//! ...
//! end
//! ```
//!
//! Values are stored as the raw IEEE-754 bit pattern in hex, so save/load
//! round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const HEADER: &str = "lightn-checkpoint v1";

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    blocks: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Parse { line: 0, msg: format!("missing meta key {key}") })
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Parse { line: 0, msg: format!("meta key {key} has invalid value") })
    }

    pub fn push_block(&mut self, name: &str, m: Matrix) {
        self.blocks.push((name.to_string(), m));
    }

    pub fn block(&self, name: &str) -> Result<&Matrix> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Parse { line: 0, msg: format!("missing block {name}") })
    }

    /// Blocks whose names start with `prefix`, in file order.
    pub fn blocks_with_prefix(&self, prefix: &str) -> Vec<(&str, &Matrix)> {
        self.blocks
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, m)| (n.as_str(), m))
            .collect()
    }

    pub fn encode(&self) -> String {
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}").unwrap();
        }
        for (name, m) in &self.blocks {
            writeln!(out, "block {name} {} {}", m.rows(), m.cols()).unwrap();
            for r in 0..m.rows() {
                let row: Vec<String> =
                    m.row_slice(r).iter().map(|v| format!("{:016x}", v.to_bits())).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, msg: "empty checkpoint".into() })?;
        if first != HEADER {
            return Err(Error::Parse { line: 1, msg: format!("bad header: {first}") });
        }
        let mut ckpt = Checkpoint::new();
        let mut done = false;
        while let Some((idx, line)) = lines.next() {
            let lineno = idx + 1;
            if line == "end" {
                done = true;
                break;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("meta") => {
                    let key = parts
                        .next()
                        .ok_or_else(|| Error::Parse { line: lineno, msg: "meta missing key".into() })?;
                    let value: Vec<&str> = parts.collect();
                    ckpt.meta.insert(key.to_string(), value.join(" "));
                }
                Some("block") => {
                    let name = parts
                        .next()
                        .ok_or_else(|| Error::Parse { line: lineno, msg: "block missing name".into() })?
                        .to_string();
                    let rows: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::Parse { line: lineno, msg: "bad row count".into() })?;
                    let cols: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::Parse { line: lineno, msg: "bad col count".into() })?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (ridx, row) = lines.next().ok_or_else(|| Error::Parse {
                            line: lineno,
                            msg: format!("block {name} truncated"),
                        })?;
                        for word in row.split_whitespace() {
                            let bits = u64::from_str_radix(word, 16).map_err(|_| Error::Parse {
                                line: ridx + 1,
                                msg: format!("bad value {word}"),
                            })?;
                            data.push(f64::from_bits(bits));
                        }
                    }
                    if data.len() != rows * cols {
                        return Err(Error::Parse {
                            line: lineno,
                            msg: format!("block {name}: expected {} values, got {}", rows * cols, data.len()),
                        });
                    }
                    ckpt.blocks.push((name, Matrix::new(rows, cols, data)));
                }
                _ => {
                    return Err(Error::Parse { line: lineno, msg: format!("unexpected line: {line}") });
                }
            }
        }
        if !done {
            return Err(Error::Parse { line: 0, msg: "missing end marker".into() });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())
            .map_err(|e| Error::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
        Self::decode(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("d_o", 64);
        ckpt.set_meta("variant", "self_correlation");
        let m = Matrix::from_rows(&[
            vec![0.1, -0.2, 1e-300],
            vec![f64::MIN_POSITIVE, 3.141592653589793, -0.0],
        ]);
        ckpt.push_block("w", m.clone());
        let text = ckpt.encode();
        let back = Checkpoint::decode(&text).unwrap();
        assert_eq!(back.meta("d_o").unwrap(), "64");
        let w = back.block("w").unwrap();
        for (a, b) in w.data().iter().zip(m.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(Checkpoint::decode("not a checkpoint\n").is_err());
        assert!(Checkpoint::decode("lightn-checkpoint v1\nblock w 2 2\n00\n").is_err());
        assert!(Checkpoint::decode("lightn-checkpoint v1\nmeta a 1\n").is_err());
    }
}
