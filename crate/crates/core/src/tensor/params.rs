use std::io::{BufRead, Read};

use indexmap::IndexMap;

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// `false` for buffers such as running normalization statistics.
    pub trainable: bool,
}

/// Ordered registry of named tensors. Iteration order is insertion order and
/// survives a blob round-trip.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: IndexMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its registry index.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let (idx, _) = self.entries.insert_full(name, Param { value, trainable });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn name(&self, idx: usize) -> &str {
        self.entries.get_index(idx).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.entries[idx].value
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].value
    }

    pub fn value_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn is_trainable(&self, idx: usize) -> bool {
        self.entries[idx].trainable
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count over every entry, buffers included.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Places every entry on the tape as a leaf, in registry order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries
            .values()
            .map(|p| tape.leaf(p.value.clone(), p.trainable))
            .collect()
    }

    /// Gradients for bound entries after a backward pass (`None` for buffers
    /// and for parameters the loss did not touch).
    pub fn collect_grads(&self, tape: &mut Tape, bound: &[Var]) -> Vec<Option<Tensor>> {
        bound
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if self.entries[i].trainable {
                    let shape = self.entries[i].value.shape().to_vec();
                    Some(tape.take_grad(*v).unwrap_or_else(|| Tensor::zeros(shape)))
                } else {
                    None
                }
            })
            .collect()
    }

    /// Text manifest (`name shape offset kind` per entry) followed by the
    /// values as little-endian f64 in registry order.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = format!("params {} {}\n", self.len(), self.param_count());
        let mut offset = 0;
        for (name, p) in &self.entries {
            let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            out.push_str(&format!(
                "{} {} {} {}\n",
                name,
                shape.join("x"),
                offset,
                if p.trainable { "param" } else { "buffer" }
            ));
            offset += p.value.len();
        }
        let mut bytes = out.into_bytes();
        for p in self.entries.values() {
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_blob(bytes: &[u8]) -> Result<Self> {
        let mut reader = std::io::Cursor::new(bytes);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let mut head = line.split_whitespace();
        if head.next() != Some("params") {
            return Err(Error::format("parameter blob: missing `params` header"));
        }
        let count: usize = parse_field(head.next(), "entry count")?;
        let total: usize = parse_field(head.next(), "scalar count")?;
        let mut specs = Vec::with_capacity(count);
        let mut expected_offset = 0;
        for _ in 0..count {
            line.clear();
            reader.read_line(&mut line)?;
            let mut f = line.split_whitespace();
            let name = f
                .next()
                .ok_or_else(|| Error::format("parameter blob: truncated manifest"))?
                .to_string();
            let shape: Vec<usize> = f
                .next()
                .ok_or_else(|| Error::format("parameter blob: missing shape"))?
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(format!("parameter blob: bad shape for `{name}`")))?;
            let offset: usize = parse_field(f.next(), "offset")?;
            if offset != expected_offset {
                return Err(Error::format(format!(
                    "parameter blob: entry `{name}` at offset {offset}, expected {expected_offset}"
                )));
            }
            let trainable = match f.next() {
                Some("param") => true,
                Some("buffer") => false,
                other => {
                    return Err(Error::format(format!(
                        "parameter blob: unknown entry kind {other:?}"
                    )))
                }
            };
            expected_offset += shape.iter().product::<usize>();
            specs.push((name, shape, trainable));
        }
        if expected_offset != total {
            return Err(Error::format("parameter blob: manifest sizes do not add up"));
        }
        let mut store = Self::new();
        let mut buf = [0u8; 8];
        for (name, shape, trainable) in specs {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                reader
                    .read_exact(&mut buf)
                    .map_err(|_| Error::format("parameter blob: truncated values"))?;
                data.push(f64::from_le_bytes(buf));
            }
            store.insert(name, Tensor::new(shape, data)?, trainable)?;
        }
        if (reader.position() as usize) != bytes.len() {
            return Err(Error::format("parameter blob: trailing bytes"));
        }
        Ok(store)
    }
}

fn parse_field<T: std::str::FromStr>(s: Option<&str>, what: &str) -> Result<T> {
    s.and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(format!("parameter blob: bad {what}")))
}
