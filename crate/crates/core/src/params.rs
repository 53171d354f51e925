//! Flat parameter storage with named, shaped blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl BlockSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// A flat vector of reals partitioned into named blocks. Teacher and
/// student copies of a model share one layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    blocks: Vec<BlockSpec>,
    pub data: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct LayoutBuilder {
    blocks: Vec<BlockSpec>,
    len: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reserve a block and return its offset.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let offset = self.len;
        let b = BlockSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
        };
        self.len += b.len();
        self.blocks.push(b);
        offset
    }

    pub fn build(self) -> ParamVector {
        ParamVector {
            data: vec![0.0; self.len],
            blocks: self.blocks,
        }
    }
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&BlockSpec> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_values(&self, name: &str) -> Option<&[f64]> {
        self.block(name).map(|b| &self.data[b.range()])
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.blocks == other.blocks
    }

    pub fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(format!(
                "{} blocks / {} values vs {} blocks / {} values",
                self.blocks.len(),
                self.len(),
                other.blocks.len(),
                other.len()
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Block indices whose name starts with `prefix`.
    pub fn ranges_with_prefix(&self, prefix: &str) -> Vec<std::ops::Range<usize>> {
        self.blocks
            .iter()
            .filter(|b| b.name.starts_with(prefix))
            .map(BlockSpec::range)
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct BlockRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    blocks: Vec<BlockRecord>,
}

impl Serialize for ParamVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ParamRecord {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockRecord {
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                    values: self.data[b.range()].to_vec(),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ParamVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = ParamRecord::deserialize(d)?;
        let mut builder = LayoutBuilder::new();
        let mut data = Vec::new();
        for b in rec.blocks {
            let expected: usize = b.shape.iter().product();
            if expected != b.values.len() {
                return Err(serde::de::Error::custom(format!(
                    "block {}: shape {:?} needs {} values, found {}",
                    b.name,
                    b.shape,
                    expected,
                    b.values.len()
                )));
            }
            builder.add(b.name, &b.shape);
            data.extend(b.values);
        }
        let mut p = builder.build();
        p.data = data;
        Ok(p)
    }
}
