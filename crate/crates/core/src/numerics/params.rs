//! Flattened parameter vectors and their on-disk format.
//!
//! A [`ParamVector`] stores every model parameter in one contiguous `Vec<f64>`
//! with a [`Layout`] describing the named tensors inside it. Teacher, proxy,
//! student and the stored downstream-loss gradient all use this type, which
//! makes perturbations like `θ + ε·g` a single pass over two slices.
//!
//! Binary format (all integers little-endian):
//!
//! ```text
//! "ADSPV1"                      6 bytes magic
//! u32 entry count
//! per entry: u32 name length, name (UTF-8), u32 rank, rank × u64 dims
//! f64 values                    total element count, little-endian
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"ADSPV1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// Ordered, contiguous list of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    index: HashMap<String, usize>,
    total: usize,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor at the current end of the layout.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<usize> {
        let name = name.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("entry `{name}` has invalid shape {shape:?}")));
        }
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate layout entry `{name}`")));
        }
        let entry = LayoutEntry {
            name: name.clone(),
            shape: shape.to_vec(),
            offset: self.total,
        };
        self.total += entry.numel();
        self.index.insert(name, self.entries.len());
        self.entries.push(entry);
        Ok(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&LayoutEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Layout,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        let values = vec![0.0; layout.total()];
        Self { layout, values }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::invalid(format!(
                "layout holds {} values, got {}",
                layout.total(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|e| &self.values[e.range()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.get(name)?.range();
        Some(&mut self.values[range])
    }

    pub(crate) fn entry_slice(&self, entry: usize) -> &[f64] {
        &self.values[self.layout.entries[entry].range()]
    }

    pub(crate) fn entry_slice_mut(&mut self, entry: usize) -> &mut [f64] {
        let range = self.layout.entries[entry].range();
        &mut self.values[range]
    }

    pub fn check_same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::invalid("parameter layouts differ"));
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_same_layout(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) -> Result<()> {
        self.check_same_layout(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.layout.entries.len() as u32).to_le_bytes());
        for e in &self.layout.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 6];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::invalid("bad ParamVector magic"));
        }
        let count = read_u32(&mut r)? as usize;
        let mut layout = Layout::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len > r.len() {
                return Err(Error::invalid("truncated ParamVector header"));
            }
            let name = std::str::from_utf8(&r[..len])
                .map_err(|_| Error::invalid("ParamVector entry name is not UTF-8"))?
                .to_string();
            r = &r[len..];
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            layout.push(name, &shape)?;
        }
        if r.len() != 8 * layout.total() {
            return Err(Error::invalid(format!(
                "ParamVector body has {} bytes, expected {}",
                r.len(),
                8 * layout.total()
            )));
        }
        let values = r
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self { layout, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    /// SHA-256 of the binary encoding, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::invalid("truncated ParamVector header"))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// `params + sign·epsilon·g`, leaving both inputs untouched.
pub fn perturb(params: &ParamVector, g: &ParamVector, epsilon: f64, sign: f64) -> Result<ParamVector> {
    params.check_same_layout(g)?;
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if sign != 1.0 && sign != -1.0 {
        return Err(Error::invalid(format!("sign must be +1 or -1, got {sign}")));
    }
    let step = sign * epsilon;
    let values = params
        .values
        .iter()
        .zip(&g.values)
        .map(|(p, d)| p + step * d)
        .collect();
    Ok(ParamVector {
        layout: params.layout.clone(),
        values,
    })
}
