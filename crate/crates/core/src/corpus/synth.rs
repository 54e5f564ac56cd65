//! Deterministic synthetic corpus: document-like column grids.
//!
//! Each layout is a title bar over 1-3 columns of stacked blocks (figures
//! and text). Blocks inside a column share left/right edges, the columns
//! share a top row, and the title shares the content-region edges, so with
//! zero jitter the Alignment metric is exactly 0; gaps always exceed the
//! jitter amplitude, so Overlap is exactly 0 by construction.

use super::DatasetRecord;
use crate::layout::{CategorySchema, Element, Layout};
use crate::util::{derive_seed_idx, rng_from_seed};
use rand::Rng;

/// Knobs for the synthetic grid generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Inclusive column count range.
    pub columns: (usize, usize),
    /// Inclusive page-margin range (normalized units).
    pub margin: (f64, f64),
    /// Uniform position jitter amplitude; must stay below half the smallest
    /// gap to preserve zero overlap.
    pub jitter: f64,
    /// Inclusive range of blocks stacked in each column.
    pub blocks_per_column: (usize, usize),
    /// Vertical/horizontal gap between blocks and columns.
    pub gutter: f64,
    /// Title bar height.
    pub title_height: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            columns: (1, 3),
            margin: (0.05, 0.11),
            jitter: 0.01,
            blocks_per_column: (1, 3),
            gutter: 0.03,
            title_height: 0.08,
        }
    }
}

impl SynthConfig {
    /// Largest element count this configuration can emit.
    pub fn max_elements(&self) -> usize {
        1 + self.columns.1 * self.blocks_per_column.1
    }
}

/// Category ids in the synthetic schema ([`CategorySchema::synthetic`]).
pub const CAT_TITLE: usize = 0;
pub const CAT_TEXT: usize = 1;
pub const CAT_FIGURE: usize = 2;

/// Generates `count` layouts; byte-deterministic in (`cfg`, `seed`).
pub fn synthesize_corpus(cfg: &SynthConfig, count: usize, seed: u64) -> Vec<DatasetRecord> {
    (0..count)
        .map(|i| DatasetRecord {
            id: format!("synth-{i:05}"),
            canvas: [1000.0, 1000.0],
            layout: synthesize_layout(cfg, derive_seed_idx(seed, "synth-layout", i as u64)),
        })
        .collect()
}

/// One grid layout from one sub-seed.
pub fn synthesize_layout(cfg: &SynthConfig, seed: u64) -> Layout {
    let mut rng = rng_from_seed(seed);
    let margin = rng.gen_range(cfg.margin.0..=cfg.margin.1);
    let columns = rng.gen_range(cfg.columns.0..=cfg.columns.1);
    let content_w = 1.0 - 2.0 * margin;
    let col_w = (content_w - cfg.gutter * (columns - 1) as f64) / columns as f64;
    let body_top = margin + cfg.title_height + cfg.gutter;
    let body_h = 1.0 - margin - body_top;

    let mut elements = vec![Element::new(CAT_TITLE, margin, margin, content_w, cfg.title_height)];

    // Pick block counts first, then figure slots over the whole page so
    // every layout keeps 1..=3 figures among its blocks.
    let mut block_counts: Vec<usize> =
        (0..columns).map(|_| rng.gen_range(cfg.blocks_per_column.0..=cfg.blocks_per_column.1)).collect();
    let mut total_blocks: usize = block_counts.iter().sum();
    // Trim the fullest column until title + blocks fits the element cap.
    while total_blocks + 1 > crate::layout::DEFAULT_MAX_ELEMENTS {
        let fullest = (0..columns).max_by_key(|&c| block_counts[c]).expect("columns >= 1");
        block_counts[fullest] -= 1;
        total_blocks -= 1;
    }
    let num_figures = rng.gen_range(1..=total_blocks.min(3));
    let mut figure_slots = vec![false; total_blocks];
    let mut placed = 0;
    while placed < num_figures {
        let slot = rng.gen_range(0..total_blocks);
        if !figure_slots[slot] {
            figure_slots[slot] = true;
            placed += 1;
        }
    }

    let mut slot = 0usize;
    for (c, &blocks) in block_counts.iter().enumerate() {
        let x = margin + c as f64 * (col_w + cfg.gutter);
        // Split the column height evenly; blocks share exact left/right
        // edges and a common top row across columns.
        let block_h = (body_h - cfg.gutter * (blocks - 1) as f64) / blocks as f64;
        for b in 0..blocks {
            let y = body_top + b as f64 * (block_h + cfg.gutter);
            let category = if figure_slots[slot] { CAT_FIGURE } else { CAT_TEXT };
            elements.push(Element::new(category, x, y, col_w, block_h));
            slot += 1;
        }
    }

    if cfg.jitter > 0.0 {
        for e in elements.iter_mut() {
            let dx = rng.gen_range(-cfg.jitter..=cfg.jitter);
            let dy = rng.gen_range(-cfg.jitter..=cfg.jitter);
            e.x = (e.x + dx).clamp(0.0, 1.0 - e.w);
            e.y = (e.y + dy).clamp(0.0, 1.0 - e.h);
        }
    }
    Layout::new(elements)
}

/// Schema the synthetic generator emits against.
pub fn synth_schema() -> CategorySchema {
    CategorySchema::synthetic()
}
