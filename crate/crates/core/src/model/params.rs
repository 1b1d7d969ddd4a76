use std::ops::Range;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// One named contiguous block inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterBlock {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl ParameterBlock {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Maps block names (e.g. `"B.free"`, `"c"`) to index ranges.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterLayout {
    blocks: Vec<ParameterBlock>,
}

impl ParameterLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block; zero-length blocks are skipped.
    pub fn push(&mut self, name: &str, len: usize) {
        if len == 0 {
            return;
        }
        let start = self.len();
        self.blocks.push(ParameterBlock {
            name: name.to_string(),
            start,
            len,
        });
    }

    pub fn len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.start + b.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn blocks(&self) -> &[ParameterBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<Range<usize>> {
        self.blocks.iter().find(|b| b.name == name).map(|b| b.range())
    }
}

/// Flat trainable-parameter vector plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub values: DVector<f64>,
    pub layout: ParameterLayout,
}

impl ParameterVector {
    pub fn new(values: DVector<f64>, layout: ParameterLayout) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(invalid(format!(
                "parameter vector has length {} but layout expects {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: ParameterLayout) -> Self {
        Self {
            values: DVector::zeros(layout.len()),
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Slice of the named block, if present.
    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .block(name)
            .map(|r| &self.values.as_slice()[r])
    }
}
