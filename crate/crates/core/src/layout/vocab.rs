//! Shared token vocabulary for layout sequences.
//!
//! Ids are packed as `[BOS, EOS, PAD, MASK, categories.., bins..]`. All four
//! geometric attributes share one bin block; which attribute a bin token
//! denotes is carried by its slot position, not its id.

use super::CategorySchema;
use crate::error::{Error, Result};
use crate::util::sha256_hex;
use serde::{Deserialize, Serialize};

/// Number of quantization bins per coordinate axis.
pub const DEFAULT_NUM_BINS: usize = 128;

/// What a single token id denotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdKind {
    Bos,
    Eos,
    Pad,
    Mask,
    Category(usize),
    Bin(usize),
}

/// Maps between symbols (specials, categories, coordinate bins) and dense
/// token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    category_names: Vec<String>,
    num_bins: usize,
}

impl Vocabulary {
    pub const BOS: usize = 0;
    pub const EOS: usize = 1;
    pub const PAD: usize = 2;
    pub const MASK: usize = 3;
    const NUM_SPECIALS: usize = 4;

    pub fn new(schema: &CategorySchema, num_bins: usize) -> Result<Self> {
        if num_bins < 2 {
            return Err(Error::Schema(format!("need at least 2 bins, got {num_bins}")));
        }
        Ok(Self { category_names: schema.names().to_vec(), num_bins })
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn num_categories(&self) -> usize {
        self.category_names.len()
    }

    pub fn category_names(&self) -> &[String] {
        &self.category_names
    }

    /// Total id count: 4 specials + categories + bins.
    pub fn len(&self) -> usize {
        Self::NUM_SPECIALS + self.num_categories() + self.num_bins
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn category_id(&self, category: usize) -> Result<usize> {
        if category >= self.num_categories() {
            return Err(Error::Schema(format!(
                "category {category} outside schema of {}",
                self.num_categories()
            )));
        }
        Ok(Self::NUM_SPECIALS + category)
    }

    pub fn bin_id(&self, bin: usize) -> Result<usize> {
        if bin >= self.num_bins {
            return Err(Error::domain(format!("bin {bin} outside [0, {})", self.num_bins)));
        }
        Ok(Self::NUM_SPECIALS + self.num_categories() + bin)
    }

    /// First id of the category block (inclusive).
    pub fn category_base(&self) -> usize {
        Self::NUM_SPECIALS
    }

    /// First id of the bin block (inclusive).
    pub fn bin_base(&self) -> usize {
        Self::NUM_SPECIALS + self.num_categories()
    }

    pub fn kind_of(&self, id: usize) -> Result<IdKind> {
        match id {
            Self::BOS => Ok(IdKind::Bos),
            Self::EOS => Ok(IdKind::Eos),
            Self::PAD => Ok(IdKind::Pad),
            Self::MASK => Ok(IdKind::Mask),
            _ if id < self.bin_base() => Ok(IdKind::Category(id - self.category_base())),
            _ if id < self.len() => Ok(IdKind::Bin(id - self.bin_base())),
            _ => Err(Error::domain(format!("token id {id} outside vocabulary of {}", self.len()))),
        }
    }

    /// Stable digest over category names and bin count; checkpoints refuse
    /// to load under a different vocabulary.
    pub fn hash(&self) -> String {
        let mut desc = String::new();
        for name in &self.category_names {
            desc.push_str(name);
            desc.push('\u{1f}');
        }
        desc.push_str(&format!("bins={}", self.num_bins));
        sha256_hex(desc.as_bytes())
    }
}
