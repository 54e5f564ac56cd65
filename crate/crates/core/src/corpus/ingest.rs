//! Ingestion of external layout sources into normalized manifests:
//! COCO-style detection annotations and RICO-style UI hierarchies.

use super::{DatasetRecord, FilterStats};
use crate::error::{Error, Result};
use crate::layout::{CategorySchema, Element, Layout, DEFAULT_MAX_ELEMENTS};
use serde::Deserialize;
use std::collections::HashMap;
use std::path::Path;

// ==================== COCO-style annotations ====================

#[derive(Deserialize)]
struct CocoFile {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: i64,
    width: f64,
    height: f64,
    #[serde(default)]
    file_name: Option<String>,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: i64,
    category_id: i64,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct CocoCategory {
    id: i64,
    name: String,
}

/// Reads a COCO-style annotation file: absolute-pixel `[x, y, w, h]` boxes
/// grouped per image, normalized by each image's canvas.
///
/// When `schema` is `None` one is derived from the file's category table
/// (names ordered by category id). Elements with unknown categories or
/// degenerate boxes are dropped per element; layouts that end up empty or
/// hold more than nine elements are dropped whole. Output is sorted by
/// record id.
pub fn ingest_coco_style(
    path: &Path,
    schema: Option<&CategorySchema>,
) -> Result<(CategorySchema, Vec<DatasetRecord>, FilterStats)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let file: CocoFile = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("{} is not COCO-style JSON: {e}", path.display())))?;

    let schema = match schema {
        Some(s) => s.clone(),
        None => {
            let mut cats = file.categories.iter().collect::<Vec<_>>();
            cats.sort_by_key(|c| c.id);
            let names: Vec<String> = cats.iter().map(|c| c.name.clone()).collect();
            let aspect = mean_aspect(file.images.iter().map(|i| (i.width, i.height)));
            CategorySchema::new(names, aspect)?
        }
    };
    let id_to_name: HashMap<i64, &str> =
        file.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let images: HashMap<i64, &CocoImage> = file.images.iter().map(|i| (i.id, i)).collect();

    let mut stats = FilterStats::default();
    let mut grouped: HashMap<i64, Vec<Element>> = HashMap::new();
    for ann in &file.annotations {
        let Some(img) = images.get(&ann.image_id) else {
            stats.dropped_malformed += 1;
            continue;
        };
        let category = id_to_name
            .get(&ann.category_id)
            .and_then(|name| schema.id(name));
        let Some(category) = category else {
            stats.dropped_unknown_category += 1;
            continue;
        };
        match normalize_box(ann.bbox, img.width, img.height, category) {
            Some(e) => grouped.entry(ann.image_id).or_default().push(e),
            None => stats.dropped_malformed += 1,
        }
    }

    let mut records = Vec::new();
    let mut image_ids: Vec<i64> = grouped.keys().copied().collect();
    image_ids.sort_unstable();
    for image_id in image_ids {
        let elements = grouped.remove(&image_id).expect("key from grouped");
        let img = images[&image_id];
        if elements.is_empty() {
            stats.dropped_empty += 1;
            continue;
        }
        if elements.len() > DEFAULT_MAX_ELEMENTS {
            stats.dropped_too_many_elements += 1;
            continue;
        }
        let id = img.file_name.clone().unwrap_or_else(|| format!("coco-{image_id}"));
        records.push(DatasetRecord {
            id,
            canvas: [img.width, img.height],
            layout: Layout::new(elements),
        });
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    stats.kept = records.len();
    Ok((schema, records, stats))
}

/// Normalizes an absolute box, clamping into the canvas; `None` when the
/// result has no usable extent.
fn normalize_box(bbox: [f64; 4], width: f64, height: f64, category: usize) -> Option<Element> {
    if width <= 0.0 || height <= 0.0 || bbox.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = (bbox[0] / width).clamp(0.0, 1.0);
    let y = (bbox[1] / height).clamp(0.0, 1.0);
    let w = (bbox[2] / width).min(1.0 - x);
    let h = (bbox[3] / height).min(1.0 - y);
    if w <= 0.0 || h <= 0.0 {
        return None;
    }
    Some(Element::new(category, x, y, w, h))
}

fn mean_aspect(dims: impl Iterator<Item = (f64, f64)>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (w, h) in dims {
        if w > 0.0 && h > 0.0 {
            sum += w / h;
            n += 1;
        }
    }
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

// ==================== UI hierarchy trees ====================

#[derive(Deserialize)]
struct HierarchyNode {
    #[serde(default)]
    bounds: Option<[f64; 4]>,
    #[serde(default)]
    class: Option<String>,
    #[serde(default, rename = "componentLabel")]
    component_label: Option<String>,
    #[serde(default)]
    children: Vec<HierarchyNode>,
}

impl HierarchyNode {
    fn label(&self) -> Option<&str> {
        self.component_label.as_deref().or(self.class.as_deref())
    }
}

fn collect_leaves<'a>(node: &'a HierarchyNode, out: &mut Vec<(&'a str, [f64; 4])>) {
    if node.children.is_empty() {
        if let (Some(label), Some(bounds)) = (node.label(), node.bounds) {
            out.push((label, bounds));
        }
        return;
    }
    for child in &node.children {
        collect_leaves(child, out);
    }
}

/// Reads per-screen hierarchy JSON files (labelled nodes with absolute
/// `[left, top, right, bottom]` bounds) and flattens their leaves.
///
/// Without an explicit schema, the `top_k` most frequent leaf labels become
/// the category set (ties broken lexicographically). Screens whose trees
/// fail to parse are skipped and counted; output is sorted by record id.
pub fn ingest_hierarchy(
    paths: &[std::path::PathBuf],
    schema: Option<&CategorySchema>,
    top_k: usize,
) -> Result<(CategorySchema, Vec<DatasetRecord>, FilterStats)> {
    let mut stats = FilterStats::default();
    // Parse every screen once; remember parse failures.
    let mut screens: Vec<(String, HierarchyNode)> = Vec::new();
    for path in paths {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        match std::fs::read_to_string(path)
            .map_err(Error::from)
            .and_then(|t| serde_json::from_str::<HierarchyNode>(&t).map_err(Error::from))
        {
            Ok(root) => screens.push((id, root)),
            Err(_) => stats.dropped_malformed += 1,
        }
    }
    screens.sort_by(|a, b| a.0.cmp(&b.0));

    let schema = match schema {
        Some(s) => s.clone(),
        None => {
            let mut freq: HashMap<&str, usize> = HashMap::new();
            let mut aspects = Vec::new();
            for (_, root) in &screens {
                let mut leaves = Vec::new();
                collect_leaves(root, &mut leaves);
                for (label, _) in leaves {
                    *freq.entry(label).or_default() += 1;
                }
                if let Some(b) = root.bounds {
                    aspects.push((b[2] - b[0], b[3] - b[1]));
                }
            }
            if freq.is_empty() {
                return Err(Error::data("no labelled leaves found in any hierarchy file"));
            }
            let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            ranked.truncate(top_k);
            let names = ranked.iter().map(|(n, _)| n.to_string()).collect();
            CategorySchema::new(names, mean_aspect(aspects.into_iter()))?
        }
    };

    let mut records = Vec::new();
    for (id, root) in screens {
        let Some(canvas) = root.bounds else {
            stats.dropped_malformed += 1;
            continue;
        };
        let (width, height) = (canvas[2] - canvas[0], canvas[3] - canvas[1]);
        if width <= 0.0 || height <= 0.0 {
            stats.dropped_malformed += 1;
            continue;
        }
        let mut leaves = Vec::new();
        collect_leaves(&root, &mut leaves);
        let mut elements = Vec::new();
        for (label, b) in leaves {
            let Some(category) = schema.id(label) else {
                stats.dropped_unknown_category += 1;
                continue;
            };
            let abs = [b[0] - canvas[0], b[1] - canvas[1], b[2] - b[0], b[3] - b[1]];
            match normalize_box(abs, width, height, category) {
                Some(e) => elements.push(e),
                None => stats.dropped_malformed += 1,
            }
        }
        if elements.is_empty() {
            stats.dropped_empty += 1;
            continue;
        }
        if elements.len() > DEFAULT_MAX_ELEMENTS {
            stats.dropped_too_many_elements += 1;
            continue;
        }
        records.push(DatasetRecord { id, canvas: [width, height], layout: Layout::new(elements) });
    }
    stats.kept = records.len();
    Ok((schema, records, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn coco_fixture() -> String {
        serde_json::json!({
            "images": [
                {"id": 1, "width": 500, "height": 1000, "file_name": "page1.png"},
                {"id": 2, "width": 100, "height": 100}
            ],
            "annotations": [
                {"image_id": 1, "category_id": 10, "bbox": [50.0, 100.0, 200.0, 300.0]},
                {"image_id": 2, "category_id": 11, "bbox": [10.0, 10.0, 30.0, 30.0]},
                {"image_id": 99, "category_id": 10, "bbox": [0.0, 0.0, 10.0, 10.0]},
                {"image_id": 2, "category_id": 999, "bbox": [0.0, 0.0, 10.0, 10.0]}
            ],
            "categories": [
                {"id": 10, "name": "text"}, {"id": 11, "name": "figure"}
            ]
        })
        .to_string()
    }

    #[test]
    fn coco_normalization_example() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.json");
        std::fs::write(&path, coco_fixture()).unwrap();
        let (schema, records, stats) = ingest_coco_style(&path, None).unwrap();
        assert_eq!(schema.names(), ["text", "figure"]);
        assert_eq!(records.len(), 2);
        assert_eq!(stats.kept, 2);
        // Annotation referencing a missing image + unknown category dropped.
        assert_eq!(stats.dropped_malformed, 1);
        assert_eq!(stats.dropped_unknown_category, 1);

        // bbox [50,100,200,300] on a 500x1000 page -> (0.1, 0.1, 0.4, 0.3).
        let page1 = records.iter().find(|r| r.id == "page1.png").unwrap();
        let e = page1.layout.elements[0];
        assert_eq!((e.x, e.y, e.w, e.h), (0.1, 0.1, 0.4, 0.3));
        assert_eq!(e.category, schema.id("text").unwrap());
        assert_eq!(page1.canvas, [500.0, 1000.0]);
    }

    #[test]
    fn coco_dense_layout_dropped() {
        let anns: Vec<serde_json::Value> = (0..10)
            .map(|i| {
                serde_json::json!({
                    "image_id": 1, "category_id": 10,
                    "bbox": [i as f64 * 9.0, 0.0, 8.0, 8.0]
                })
            })
            .collect();
        let file = serde_json::json!({
            "images": [{"id": 1, "width": 100, "height": 100}],
            "annotations": anns,
            "categories": [{"id": 10, "name": "text"}]
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dense.json");
        std::fs::write(&path, file.to_string()).unwrap();
        let (_, records, stats) = ingest_coco_style(&path, None).unwrap();
        assert!(records.is_empty());
        assert_eq!(stats.dropped_too_many_elements, 1);
    }

    #[test]
    fn coco_empty_annotations_empty_manifest() {
        let file = serde_json::json!({
            "images": [], "annotations": [],
            "categories": [{"id": 1, "name": "text"}]
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        std::fs::write(&path, file.to_string()).unwrap();
        let (_, records, stats) = ingest_coco_style(&path, None).unwrap();
        assert!(records.is_empty());
        assert_eq!(stats, FilterStats::default());
    }

    #[test]
    fn coco_unparseable_is_hard_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.json");
        std::fs::write(&path, "{not json").unwrap();
        assert!(ingest_coco_style(&path, None).is_err());
    }

    fn screen_fixture(label_a: &str, label_b: &str) -> String {
        serde_json::json!({
            "bounds": [0, 0, 1440, 2560],
            "class": "Root",
            "children": [
                {"bounds": [0, 0, 1440, 256], "componentLabel": label_a, "children": []},
                {"bounds": [0, 300, 720, 800], "componentLabel": label_b},
                {"bounds": [720, 300, 1440, 800], "class": "android.widget.TextView",
                 "componentLabel": label_b, "children": []}
            ]
        })
        .to_string()
    }

    #[test]
    fn hierarchy_flattens_leaves_and_derives_schema() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for (i, (a, b)) in
            [("Toolbar", "Text"), ("Toolbar", "Image"), ("Text", "Text")].iter().enumerate()
        {
            let p = dir.path().join(format!("screen{i}.json"));
            std::fs::write(&p, screen_fixture(a, b)).unwrap();
            paths.push(p);
        }
        // Broken file gets skipped and counted.
        let broken = dir.path().join("zz-broken.json");
        let mut f = std::fs::File::create(&broken).unwrap();
        write!(f, "[[[").unwrap();
        paths.push(broken);

        let (schema, records, stats) = ingest_hierarchy(&paths, None, 2).unwrap();
        // Frequencies: Text 5, Toolbar 2, Image 2 -> top-2 keeps Text and
        // the lexicographically-first of the tied pair.
        assert_eq!(schema.names(), ["Text", "Image"]);
        assert_eq!(stats.dropped_malformed, 1);
        assert_eq!(records.len(), 3);
        assert!(records.windows(2).all(|w| w[0].id < w[1].id));

        // Normalized leaf geometry: toolbar spans full width, 10% height.
        // screen0's toolbar label is outside the schema, so its first
        // element is the "Text" leaf at [0, 300, 720, 800].
        let s0 = &records[0];
        let e = s0.layout.elements[0];
        assert!((e.x - 0.0).abs() < 1e-12 && (e.w - 0.5).abs() < 1e-12);
        assert!((e.y - 300.0 / 2560.0).abs() < 1e-12);
        assert!(stats.dropped_unknown_category > 0);
    }

    #[test]
    fn hierarchy_respects_explicit_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        std::fs::write(&p, screen_fixture("Toolbar", "Text")).unwrap();
        let schema = CategorySchema::new(vec!["Toolbar".into()], 0.5625).unwrap();
        let (got, records, _) = ingest_hierarchy(&[p], Some(&schema), 13).unwrap();
        assert_eq!(got, schema);
        assert_eq!(records[0].layout.len(), 1);
        assert_eq!(records[0].layout.elements[0].category, 0);
    }
}
