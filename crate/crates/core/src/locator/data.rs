//! Locator training data: refinement snapshots labelled by matching
//! against retrieved real layouts.
//!
//! Each record pairs one decoded hypothesis from a refinement run with
//! per-element, per-attribute error flags. The flags come from Hungarian
//! matching the hypothesis against the closest real layout sharing its
//! category multiset: attributes that disagree beyond the matching
//! tolerance are the ones a locator should learn to flag. On disk a record
//! is a rendered PNG next to a JSON sidecar carrying the boxes, categories,
//! flags, and provenance.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::exec::{map_items, Parallelism};
use crate::layout::{Element, Layout, SequenceCodec};
use crate::matching::{
    annotate_masks, hungarian_match, retrieve_reference, CorpusIndex, MaskAnnotation,
    MatchCostParams,
};
use crate::refine::{generate, Condition, GenerationTask, MaskingPolicy};
use crate::render::{render_wireframe, RenderConfig};
use crate::util::derive_seed_idx;

// ============================================================================
// Records
// ============================================================================

/// One labelled snapshot: where it came from, which refinement iteration
/// produced it, the decoded hypothesis, and its error flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocatorRecord {
    pub source_id: String,
    /// 1-based refinement iteration the snapshot was taken at.
    pub iteration: usize,
    pub layout: Layout,
    pub annotation: MaskAnnotation,
}

/// On-disk sidecar schema. `boxes[i]` and `mask[i]` describe the element
/// with `category[i]`, in layout order.
#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    boxes: Vec<[f64; 4]>,
    category: Vec<usize>,
    mask: Vec<[bool; 4]>,
    source_id: String,
    iteration: usize,
}

fn file_stem(record: &LocatorRecord) -> String {
    let safe: String = record
        .source_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect();
    format!("{safe}_it{:03}", record.iteration)
}

/// Writes every record as `<id>_it<k>.png` plus `<id>_it<k>.json` under
/// `dir` (created if missing). The PNG is the wireframe render the pixel
/// locator trains on; the sidecar alone suffices to reload the record.
pub fn save_locator_dataset(
    records: &[LocatorRecord],
    num_categories: usize,
    image_size: usize,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let render_cfg = RenderConfig { width: image_size, height: image_size };
    for record in records {
        let stem = file_stem(record);
        let image = render_wireframe(&record.layout, num_categories, &render_cfg)?;
        image.save_png(&dir.join(format!("{stem}.png")))?;
        let sidecar = Sidecar {
            boxes: record.layout.elements.iter().map(|e| e.bbox()).collect(),
            category: record.layout.elements.iter().map(|e| e.category).collect(),
            mask: record.annotation.flags.clone(),
            source_id: record.source_id.clone(),
            iteration: record.iteration,
        };
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&sidecar)?)?;
    }
    Ok(())
}

/// Reads every sidecar under `dir`, sorted by source id then iteration.
pub fn load_locator_dataset(dir: impl AsRef<Path>) -> Result<Vec<LocatorRecord>> {
    let dir = dir.as_ref();
    let mut records = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(&path)?)?;
        if sidecar.boxes.len() != sidecar.category.len()
            || sidecar.boxes.len() != sidecar.mask.len()
        {
            return Err(Error::data(format!(
                "sidecar {} has inconsistent lengths: {} boxes, {} categories, {} masks",
                path.display(),
                sidecar.boxes.len(),
                sidecar.category.len(),
                sidecar.mask.len()
            )));
        }
        let elements: Vec<Element> = sidecar
            .boxes
            .iter()
            .zip(&sidecar.category)
            .map(|(&[x, y, w, h], &cat)| Element::new(cat, x, y, w, h))
            .collect();
        let mut layout = Layout::new(elements);
        layout.source_id = Some(sidecar.source_id.clone());
        records.push(LocatorRecord {
            source_id: sidecar.source_id,
            iteration: sidecar.iteration,
            layout,
            annotation: MaskAnnotation { flags: sidecar.mask },
        });
    }
    records.sort_by(|a, b| a.source_id.cmp(&b.source_id).then(a.iteration.cmp(&b.iteration)));
    Ok(records)
}

// ============================================================================
// Dataset construction
// ============================================================================

/// Outcome counts from one dataset build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCoverage {
    /// Corpus layouts visited.
    pub source_layouts: usize,
    /// Corpus layouts skipped before generation (empty, or too many
    /// elements for the codec).
    pub skipped_sources: usize,
    /// Snapshot records emitted.
    pub emitted: usize,
    /// Snapshots dropped because no reference layout could be retrieved.
    pub dropped_retrieval_miss: usize,
}

/// Builds locator training records by running category-conditioned
/// refinement on every corpus layout and labelling chosen intermediate
/// iterations against retrieved references.
///
/// For each corpus layout, a category-conditioned generation runs under the
/// least-confident policy; the filled hypotheses at `sample_iterations`
/// (1-based) are matched against the closest real layout sharing their
/// category multiset, and per-attribute disagreements beyond the matching
/// tolerance become the flags. Records come back sorted by source id then
/// iteration. Hypotheses whose reference retrieval misses are dropped and
/// counted rather than failing the build.
#[allow(clippy::too_many_arguments)]
pub fn build_locator_dataset(
    decoder: &Decoder<f32>,
    histogram: &[u64],
    codec: &SequenceCodec,
    corpus: &CorpusIndex,
    sample_iterations: &[usize],
    match_params: &MatchCostParams,
    retrieval_cap: usize,
    seed: u64,
    par: Parallelism,
) -> Result<(Vec<LocatorRecord>, DatasetCoverage)> {
    match_params.validate()?;
    if corpus.is_empty() {
        return Err(Error::data("cannot build locator data from an empty corpus"));
    }
    if sample_iterations.is_empty() {
        return Err(Error::Precondition("no snapshot iterations requested".to_string()));
    }
    if retrieval_cap == 0 {
        return Err(Error::Precondition("retrieval candidate cap must be positive".to_string()));
    }
    let task_iterations = crate::refine::DEFAULT_ITERATIONS;
    if let Some(&bad) = sample_iterations.iter().find(|&&t| t == 0 || t > task_iterations) {
        return Err(Error::Precondition(format!(
            "snapshot iteration {bad} outside the refinement range 1..={task_iterations}"
        )));
    }

    struct SourceOutcome {
        records: Vec<LocatorRecord>,
        dropped: usize,
        skipped: bool,
    }

    let items: Vec<usize> = (0..corpus.len()).collect();
    let outcomes: Vec<Result<SourceOutcome>> = map_items(par, &items, |&idx| {
        let source = &corpus.layouts()[idx];
        let source_id = source
            .source_id
            .clone()
            .unwrap_or_else(|| format!("layout-{idx:06}"));
        let categories: Vec<usize> = source.elements.iter().map(|e| e.category).collect();
        if categories.is_empty() || categories.len() > codec.max_elements() {
            return Ok(SourceOutcome { records: Vec::new(), dropped: 0, skipped: true });
        }
        let task = GenerationTask::new(
            Condition::Categories(categories),
            MaskingPolicy::LeastConfident,
            derive_seed_idx(seed, "locator-data", idx as u64),
        );
        let (_, trace) = generate(&task, decoder, None, histogram, codec)?;
        let mut records = Vec::with_capacity(sample_iterations.len());
        let mut dropped = 0usize;
        for &t in sample_iterations {
            let snapshot = &trace.snapshots[t - 1];
            let reference = match retrieve_reference(
                &snapshot.layout,
                corpus,
                match_params,
                retrieval_cap,
                derive_seed_idx(seed, "locator-retrieval", idx as u64),
            ) {
                Ok(reference) => reference,
                Err(Error::RetrievalMiss(_)) => {
                    dropped += 1;
                    continue;
                }
                Err(other) => return Err(other),
            };
            let matching = hungarian_match(&snapshot.layout, &reference, match_params)?;
            let annotation = annotate_masks(&snapshot.layout, &reference, &matching, match_params)?;
            records.push(LocatorRecord {
                source_id: source_id.clone(),
                iteration: t,
                layout: snapshot.layout.clone(),
                annotation,
            });
        }
        Ok(SourceOutcome { records, dropped, skipped: false })
    });

    let mut records = Vec::new();
    let mut coverage = DatasetCoverage {
        source_layouts: corpus.len(),
        skipped_sources: 0,
        emitted: 0,
        dropped_retrieval_miss: 0,
    };
    for outcome in outcomes {
        let outcome = outcome?;
        coverage.skipped_sources += outcome.skipped as usize;
        coverage.dropped_retrieval_miss += outcome.dropped;
        records.extend(outcome.records);
    }
    records.sort_by(|a, b| a.source_id.cmp(&b.source_id).then(a.iteration.cmp(&b.iteration)));
    coverage.emitted = records.len();
    Ok((records, coverage))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{synthesize_corpus, SynthConfig};
    use crate::decoder::DecoderConfig;
    use crate::layout::{CategorySchema, Vocabulary};

    fn sample_records() -> Vec<LocatorRecord> {
        let mut layout_a = Layout::new(vec![
            Element::new(0, 0.1, 0.1, 0.3, 0.25),
            Element::new(2, 0.5, 0.55, 0.3, 0.3),
        ]);
        layout_a.source_id = Some("alpha".to_string());
        let mut layout_b = Layout::new(vec![Element::new(1, 0.2, 0.3, 0.4, 0.2)]);
        layout_b.source_id = Some("beta".to_string());
        vec![
            LocatorRecord {
                source_id: "alpha".to_string(),
                iteration: 2,
                layout: layout_a,
                annotation: MaskAnnotation {
                    flags: vec![[true, false, false, true], [false; 4]],
                },
            },
            LocatorRecord {
                source_id: "beta".to_string(),
                iteration: 1,
                layout: layout_b,
                annotation: MaskAnnotation { flags: vec![[false, true, false, false]] },
            },
        ]
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let records = sample_records();
        let dir = tempfile::tempdir().unwrap();
        save_locator_dataset(&records, 3, 32, dir.path()).unwrap();
        let loaded = load_locator_dataset(dir.path()).unwrap();
        assert_eq!(loaded, records);
    }

    #[test]
    fn saved_png_matches_rerendered_layout() {
        let records = sample_records();
        let dir = tempfile::tempdir().unwrap();
        save_locator_dataset(&records, 3, 32, dir.path()).unwrap();
        let png = fs::read(dir.path().join("alpha_it002.png")).unwrap();
        let fresh = render_wireframe(
            &records[0].layout,
            3,
            &RenderConfig { width: 32, height: 32 },
        )
        .unwrap();
        assert_eq!(png, fresh.to_png_bytes().unwrap());
    }

    #[test]
    fn sidecar_uses_the_pinned_field_names() {
        let records = sample_records();
        let dir = tempfile::tempdir().unwrap();
        save_locator_dataset(&records, 3, 32, dir.path()).unwrap();
        let raw = fs::read_to_string(dir.path().join("beta_it001.json")).unwrap();
        let value: serde_json::Value = serde_json::from_str(&raw).unwrap();
        let object = value.as_object().unwrap();
        let mut keys: Vec<&str> = object.keys().map(|k| k.as_str()).collect();
        keys.sort_unstable();
        assert_eq!(keys, vec!["boxes", "category", "iteration", "mask", "source_id"]);
        assert_eq!(object["iteration"], serde_json::json!(1));
        assert_eq!(object["boxes"][0][2], serde_json::json!(0.4));
    }

    #[test]
    fn load_rejects_inconsistent_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("bad.json"),
            r#"{"boxes": [[0.1, 0.1, 0.2, 0.2]], "category": [0, 1], "mask": [[false, false, false, false]], "source_id": "bad", "iteration": 1}"#,
        )
        .unwrap();
        assert!(load_locator_dataset(dir.path()).is_err());
    }

    fn tiny_decoder_and_codec() -> (Decoder<f32>, SequenceCodec, Vec<Layout>) {
        let vocab = Vocabulary::new(&CategorySchema::synthetic(), 128).unwrap();
        let mut cfg = DecoderConfig::desk_scale(vocab.clone());
        cfg.num_layers = 1;
        cfg.model_dim = 32;
        cfg.num_heads = 2;
        cfg.image_size = 32;
        let decoder = Decoder::<f32>::new(cfg.clone(), 9).unwrap();
        let codec = SequenceCodec::new(vocab, cfg.max_elements);
        let layouts: Vec<Layout> = synthesize_corpus(&SynthConfig::default(), 6, 40)
            .into_iter()
            .map(|r| {
                let mut layout = r.layout;
                layout.source_id = Some(r.id);
                layout
            })
            .collect();
        (decoder, codec, layouts)
    }

    #[test]
    fn builds_sorted_records_at_requested_iterations() {
        let (decoder, codec, layouts) = tiny_decoder_and_codec();
        let corpus = CorpusIndex::build(layouts);
        let histogram = vec![0, 1, 1, 1, 1, 1, 1, 0, 0, 0];
        let (records, coverage) = build_locator_dataset(
            &decoder,
            &histogram,
            &codec,
            &corpus,
            &[1, 2],
            &MatchCostParams::default(),
            32,
            77,
            Parallelism::Sequential,
        )
        .unwrap();
        assert_eq!(coverage.source_layouts, 6);
        assert_eq!(coverage.skipped_sources, 0);
        assert_eq!(coverage.emitted, records.len());
        assert_eq!(records.len(), 12);
        for pair in records.windows(2) {
            assert!(
                (pair[0].source_id.as_str(), pair[0].iteration)
                    <= (pair[1].source_id.as_str(), pair[1].iteration)
            );
        }
        for record in &records {
            assert!(record.iteration == 1 || record.iteration == 2);
            assert_eq!(record.annotation.flags.len(), record.layout.len());
        }
    }

    #[test]
    fn build_matches_across_execution_modes() {
        let (decoder, codec, layouts) = tiny_decoder_and_codec();
        let corpus = CorpusIndex::build(layouts);
        let histogram = vec![0, 1, 1, 1, 1, 1, 1, 0, 0, 0];
        let build = |par| {
            build_locator_dataset(
                &decoder,
                &histogram,
                &codec,
                &corpus,
                &[2],
                &MatchCostParams::default(),
                32,
                5,
                par,
            )
            .unwrap()
        };
        let (seq_records, seq_cov) = build(Parallelism::Sequential);
        let (par_records, par_cov) = build(Parallelism::Parallel);
        assert_eq!(seq_records, par_records);
        assert_eq!(seq_cov, par_cov);
    }

    #[test]
    fn build_rejects_bad_iteration_requests() {
        let (decoder, codec, layouts) = tiny_decoder_and_codec();
        let corpus = CorpusIndex::build(layouts);
        let histogram = vec![0, 1, 1, 1, 1, 1, 1, 0, 0, 0];
        let bad_requests: [&[usize]; 3] = [&[0], &[11], &[]];
        for bad in bad_requests {
            assert!(build_locator_dataset(
                &decoder,
                &histogram,
                &codec,
                &corpus,
                bad,
                &MatchCostParams::default(),
                32,
                5,
                Parallelism::Sequential,
            )
            .is_err());
        }
    }
}
