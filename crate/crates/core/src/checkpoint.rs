//! Plain-text key→tensor checkpoints.
//!
//! ```text
//! asr-checkpoint v1
//! kind encoder
//! tensor w1 2 64 20
//! <64*20 values, row-major, space separated>
//! scalar step 120
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a write/read
//! cycle reproduces every bit.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

const MAGIC: &str = "asr-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
enum Entry {
    Scalar(f64),
    Tensor { shape: Vec<usize>, data: Vec<f64> },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    kind: String,
    entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_owned(),
            entries: Vec::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn put_scalar(&mut self, name: &str, v: f64) {
        self.entries.push((name.to_owned(), Entry::Scalar(v)));
    }

    pub fn put_matrix(&mut self, name: &str, m: &Array2<f64>) {
        self.entries.push((
            name.to_owned(),
            Entry::Tensor {
                shape: vec![m.nrows(), m.ncols()],
                data: m.iter().copied().collect(),
            },
        ));
    }

    pub fn put_vector(&mut self, name: &str, v: &Array1<f64>) {
        self.entries.push((
            name.to_owned(),
            Entry::Tensor {
                shape: vec![v.len()],
                data: v.to_vec(),
            },
        ));
    }

    fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no entry `{name}`")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        match self.get(name)? {
            Entry::Scalar(v) => Ok(*v),
            _ => Err(Error::invalid(format!("`{name}` is not a scalar"))),
        }
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        match self.get(name)? {
            Entry::Tensor { shape, data } if shape.len() == 2 => {
                Array2::from_shape_vec((shape[0], shape[1]), data.clone())
                    .map_err(|e| Error::invalid(e.to_string()))
            }
            _ => Err(Error::invalid(format!("`{name}` is not a matrix"))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f64>> {
        match self.get(name)? {
            Entry::Tensor { shape, data } if shape.len() == 1 => Ok(Array1::from(data.clone())),
            _ => Err(Error::invalid(format!("`{name}` is not a vector"))),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC}\nkind {}\n", self.kind);
        for (name, entry) in &self.entries {
            match entry {
                Entry::Scalar(v) => writeln!(out, "scalar {name} {v}").unwrap(),
                Entry::Tensor { shape, data } => {
                    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
                    writeln!(out, "tensor {name} {} {}", shape.len(), dims.join(" ")).unwrap();
                    let vals: Vec<String> = data.iter().map(|v| v.to_string()).collect();
                    writeln!(out, "{}", vals.join(" ")).unwrap();
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Parse {
            path: "<checkpoint>".into(),
            line: line as u64,
            message: msg.to_owned(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => return Err(bad(1, "missing checkpoint header")),
        }
        let kind = match lines.next() {
            Some((_, l)) if l.starts_with("kind ") => l[5..].trim().to_owned(),
            _ => return Err(bad(2, "missing kind line")),
        };
        let mut ckpt = Checkpoint::new(&kind);
        while let Some((no, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["scalar", name, v] => {
                    let v = v.parse().map_err(|_| bad(no, "bad scalar value"))?;
                    ckpt.put_scalar(name, v);
                }
                ["tensor", name, ndim, dims @ ..] => {
                    let ndim: usize = ndim.parse().map_err(|_| bad(no, "bad rank"))?;
                    if dims.len() != ndim {
                        return Err(bad(no, "rank does not match dimension count"));
                    }
                    let shape: Vec<usize> = dims
                        .iter()
                        .map(|d| d.parse().map_err(|_| bad(no, "bad dimension")))
                        .collect::<Result<_>>()?;
                    let (vno, vline) = lines.next().ok_or_else(|| bad(no, "missing tensor data"))?;
                    let data: Vec<f64> = vline
                        .split_whitespace()
                        .map(|v| v.parse().map_err(|_| bad(vno, "bad tensor value")))
                        .collect::<Result<_>>()?;
                    if data.len() != shape.iter().product::<usize>() {
                        return Err(bad(vno, "tensor data length does not match shape"));
                    }
                    ckpt.entries
                        .push((name.to_string(), Entry::Tensor { shape, data }));
                }
                _ => return Err(bad(no, "unrecognized line")),
            }
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }
}
