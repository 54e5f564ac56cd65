//! Canonical layout data model: categorized, normalized bounding boxes in
//! top-left-anchored coordinates, plus element ordering strategies.

mod codec;
mod seq;
mod vocab;

pub use codec::{continuize, discretize, SequenceCodec};
pub use seq::{slot_kind, SlotKind, TokenSequence, SLOTS_PER_ELEMENT};
pub use vocab::{IdKind, Vocabulary, DEFAULT_NUM_BINS};

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Default cap on elements per layout; denser layouts are filtered at
/// ingestion.
pub const DEFAULT_MAX_ELEMENTS: usize = 9;

/// The ordered label space of element categories for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySchema {
    names: Vec<String>,
    canvas_aspect: f64,
}

impl CategorySchema {
    pub fn new(names: Vec<String>, canvas_aspect: f64) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Schema("schema needs at least one category".into()));
        }
        for (i, a) in names.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::Schema(format!("category {i} has an empty name")));
            }
            if names[..i].contains(a) {
                return Err(Error::Schema(format!("duplicate category name '{a}'")));
            }
        }
        if !(canvas_aspect.is_finite() && canvas_aspect > 0.0) {
            return Err(Error::Schema(format!(
                "canvas aspect must be positive, got {canvas_aspect}"
            )));
        }
        Ok(Self { names, canvas_aspect })
    }

    /// Three-category document schema used by the synthetic corpus.
    pub fn synthetic() -> Self {
        Self::new(
            vec!["title".into(), "text".into(), "figure".into()],
            1.0,
        )
        .unwrap()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn canvas_aspect(&self) -> f64 {
        self.canvas_aspect
    }

    pub fn name(&self, id: usize) -> Result<&str> {
        self.names
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Schema(format!("category id {id} outside schema of {}", self.len())))
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// One layout element: a category plus a normalized top-left-anchored box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub category: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Element {
    pub fn new(category: usize, x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { category, x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn bbox(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    /// Checks the completeness invariants. `slack` bounds how far x+w and
    /// y+h may exceed 1 (half a quantization bin for decoded layouts).
    pub fn validate(&self, num_categories: usize, slack: f64) -> Result<()> {
        if self.category >= num_categories {
            return Err(Error::Schema(format!(
                "category id {} outside schema of {num_categories}",
                self.category
            )));
        }
        let coord_ok = |v: f64| (0.0..=1.0).contains(&v) && v.is_finite();
        if !coord_ok(self.x) || !coord_ok(self.y) {
            return Err(Error::domain(format!(
                "element position ({}, {}) outside [0,1]",
                self.x, self.y
            )));
        }
        if !(self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0) {
            return Err(Error::domain(format!(
                "element size ({}, {}) outside (0,1]",
                self.w, self.h
            )));
        }
        if self.right() > 1.0 + slack || self.bottom() > 1.0 + slack {
            return Err(Error::domain(format!(
                "element extends past the canvas: right {:.6}, bottom {:.6}",
                self.right(),
                self.bottom()
            )));
        }
        Ok(())
    }
}

/// An ordered set of elements with optional provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub elements: Vec<Element>,
    pub source_id: Option<String>,
}

impl Layout {
    pub fn new(elements: Vec<Element>) -> Self {
        Self { elements, source_id: None }
    }

    pub fn with_source(elements: Vec<Element>, source_id: impl Into<String>) -> Self {
        Self { elements, source_id: Some(source_id.into()) }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Sorted category ids; two layouts are retrieval-compatible iff these
    /// are equal.
    pub fn category_multiset(&self) -> Vec<usize> {
        let mut cats: Vec<usize> = self.elements.iter().map(|e| e.category).collect();
        cats.sort_unstable();
        cats
    }

    pub fn categories(&self) -> Vec<usize> {
        self.elements.iter().map(|e| e.category).collect()
    }

    pub fn validate(&self, schema: &CategorySchema, max_elements: usize, slack: f64) -> Result<()> {
        if self.elements.is_empty() {
            return Err(Error::domain("layout has no elements"));
        }
        if self.elements.len() > max_elements {
            return Err(Error::Capacity { got: self.elements.len(), max: max_elements });
        }
        for e in &self.elements {
            e.validate(schema.len(), slack)?;
        }
        Ok(())
    }
}

/// Strategy for arranging elements before sequence encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementOrder {
    /// Lexicographic by top-left corner: y first, then x.
    Position,
    /// Stable sort by category id; relative order within a category is kept.
    Category,
    /// Keep the stored order.
    AsIs,
    /// Seeded shuffle.
    Random(u64),
}

/// Returns a copy of `layout` with its elements rearranged.
///
/// All strategies are permutations: element field values are untouched.
pub fn sort_elements(layout: &Layout, order: ElementOrder) -> Layout {
    let mut out = layout.clone();
    match order {
        ElementOrder::Position => {
            out.elements.sort_by(|a, b| {
                a.y.total_cmp(&b.y).then_with(|| a.x.total_cmp(&b.x))
            });
        }
        ElementOrder::Category => {
            out.elements.sort_by_key(|e| e.category);
        }
        ElementOrder::AsIs => {}
        ElementOrder::Random(seed) => {
            let mut rng = crate::util::rng_from_seed(seed);
            out.elements.shuffle(&mut rng);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn elem(cat: usize, x: f64, y: f64) -> Element {
        Element::new(cat, x, y, 0.2, 0.1)
    }

    #[test]
    fn schema_rejects_duplicates_and_empty() {
        assert!(CategorySchema::new(vec![], 1.0).is_err());
        assert!(CategorySchema::new(vec!["a".into(), "a".into()], 1.0).is_err());
        assert!(CategorySchema::new(vec!["a".into(), "".into()], 1.0).is_err());
        let s = CategorySchema::new(vec!["a".into(), "b".into()], 1.0).unwrap();
        assert_eq!(s.id("b"), Some(1));
        assert_eq!(s.name(0).unwrap(), "a");
        assert!(s.name(2).is_err());
    }

    #[test]
    fn single_element_layout_is_fixed_by_every_order() {
        let l = Layout::new(vec![elem(1, 0.3, 0.3)]);
        for order in [
            ElementOrder::Position,
            ElementOrder::Category,
            ElementOrder::AsIs,
            ElementOrder::Random(5),
        ] {
            assert_eq!(sort_elements(&l, order), l);
        }
    }

    #[test]
    fn position_order_sorts_by_y_then_x() {
        let l = Layout::new(vec![elem(0, 0.1, 0.5), elem(1, 0.9, 0.1)]);
        let sorted = sort_elements(&l, ElementOrder::Position);
        assert_eq!(sorted.elements[0].y, 0.1);
        assert_eq!(sorted.elements[1].y, 0.5);

        // Equal y falls back to x.
        let l = Layout::new(vec![elem(0, 0.8, 0.2), elem(1, 0.1, 0.2)]);
        let sorted = sort_elements(&l, ElementOrder::Position);
        assert_eq!(sorted.elements[0].x, 0.1);
    }

    #[test]
    fn category_order_is_stable() {
        let l = Layout::new(vec![elem(2, 0.1, 0.1), elem(1, 0.2, 0.2), elem(2, 0.3, 0.3)]);
        let sorted = sort_elements(&l, ElementOrder::Category);
        assert_eq!(sorted.categories(), vec![1, 2, 2]);
        // The two category-2 elements keep their original relative order.
        assert_eq!(sorted.elements[1].x, 0.1);
        assert_eq!(sorted.elements[2].x, 0.3);
    }

    #[test]
    fn sorting_preserves_multiset_and_fields() {
        let l = Layout::new(vec![elem(2, 0.5, 0.9), elem(0, 0.2, 0.1), elem(1, 0.4, 0.4)]);
        for order in [ElementOrder::Position, ElementOrder::Category, ElementOrder::Random(3)] {
            let sorted = sort_elements(&l, order);
            assert_eq!(sorted.category_multiset(), l.category_multiset());
            let mut a: Vec<_> = l.elements.iter().map(|e| format!("{e:?}")).collect();
            let mut b: Vec<_> = sorted.elements.iter().map(|e| format!("{e:?}")).collect();
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn layout_validation_enforces_bounds() {
        let schema = CategorySchema::synthetic();
        let ok = Layout::new(vec![Element::new(0, 0.0, 0.0, 1.0, 1.0)]);
        ok.validate(&schema, 9, 1.0 / 256.0).unwrap();

        let too_many = Layout::new(vec![elem(0, 0.1, 0.1); 10]);
        assert!(matches!(
            too_many.validate(&schema, 9, 0.0),
            Err(Error::Capacity { got: 10, max: 9 })
        ));

        let bad_cat = Layout::new(vec![elem(7, 0.1, 0.1)]);
        assert!(bad_cat.validate(&schema, 9, 0.0).is_err());

        let zero_w = Layout::new(vec![Element::new(0, 0.1, 0.1, 0.0, 0.5)]);
        assert!(zero_w.validate(&schema, 9, 0.0).is_err());

        let overhang = Layout::new(vec![Element::new(0, 0.9, 0.1, 0.2, 0.5)]);
        assert!(overhang.validate(&schema, 9, 1.0 / 256.0).is_err());
    }
}
