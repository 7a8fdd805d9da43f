use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name and shape of one parameter block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDesc {
    pub name: String,
    pub shape: Vec<usize>,
}

impl BlockDesc {
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat f64 parameter vector partitioned into named, row-major blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    blocks: Vec<BlockDesc>,
    offsets: Vec<usize>,
    values: Vec<f64>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            blocks: Vec::new(),
            offsets: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Appends a zero-filled block and returns its flat offset.
    pub fn add_block(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<usize> {
        let name = name.into();
        if self.blocks.iter().any(|b| b.name == name) {
            return Err(Error::InvalidInput(format!("duplicate parameter block {name}")));
        }
        let desc = BlockDesc {
            name,
            shape: shape.to_vec(),
        };
        let offset = self.values.len();
        self.values.resize(offset + desc.size(), 0.0);
        self.offsets.push(offset);
        self.blocks.push(desc);
        Ok(offset)
    }

    /// Rebuilds a store from descriptors and a flat array.
    pub fn from_parts(blocks: Vec<BlockDesc>, values: Vec<f64>) -> Result<Self> {
        let mut store = Self::new();
        for b in &blocks {
            store.add_block(b.name.clone(), &b.shape)?;
        }
        if store.values.len() != values.len() {
            return Err(Error::InvalidInput(format!(
                "flat length {} does not match block sizes {}",
                values.len(),
                store.values.len()
            )));
        }
        store.values = values;
        Ok(store)
    }

    pub fn blocks(&self) -> &[BlockDesc] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.blocks
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::InvalidInput(format!("no parameter block named {name}")))
    }

    pub fn offset(&self, name: &str) -> Result<usize> {
        Ok(self.offsets[self.index_of(name)?])
    }

    pub fn block(&self, name: &str) -> Result<&[f64]> {
        let i = self.index_of(name)?;
        let o = self.offsets[i];
        Ok(&self.values[o..o + self.blocks[i].size()])
    }

    pub fn block_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let i = self.index_of(name)?;
        let o = self.offsets[i];
        let n = self.blocks[i].size();
        Ok(&mut self.values[o..o + n])
    }

    /// Fills a block with U(-bound, bound).
    pub fn init_uniform<R: Rng>(&mut self, name: &str, bound: f64, rng: &mut R) -> Result<()> {
        for v in self.block_mut(name)? {
            *v = if bound > 0.0 {
                rng.gen_range(-bound..bound)
            } else {
                0.0
            };
        }
        Ok(())
    }

    pub fn fill(&mut self, name: &str, value: f64) -> Result<()> {
        self.block_mut(name)?.fill(value);
        Ok(())
    }
}
