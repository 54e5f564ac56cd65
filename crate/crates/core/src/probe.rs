//! Object-space versus pixel-space annotation probe.
//!
//! Perturbing corpus layouts at a known noise range yields datasets whose
//! ground-truth attribute flags are exact by construction, so classifier
//! precision and recall carry no label noise. The probe builds such a
//! dataset at each configured noise range, trains the object-space token
//! tagger and the pixel-space locator on the same records, and tabulates
//! their attribute-flag precision, recall, and F1 side by side.

use serde::{Deserialize, Serialize};

use crate::corpus::perturb::perturb;
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::layout::{Layout, Vocabulary};
use crate::locator::{
    evaluate_locator, evaluate_tagger, train_locator, train_tagger, LocatorConfig, LocatorRecord,
    TaggerConfig,
};
use crate::matching::MaskAnnotation;
use crate::util::{derive_seed, derive_seed_idx};

// ============================================================================
// Configuration
// ============================================================================

/// Probe settings: which noise ranges to sweep and how to train the two
/// classifier profiles. Element- and attribute-selection probabilities are
/// fixed inside [`perturb`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Additive-noise ranges, one labelled dataset per entry.
    pub noise_levels: Vec<f64>,
    /// Object-space classifier profile.
    pub tagger: TaggerConfig,
    /// Pixel-space classifier profile.
    pub locator: LocatorConfig,
    pub tagger_steps: usize,
    pub locator_steps: usize,
    /// Fraction of usable layouts held out for evaluation.
    pub eval_fraction: f64,
}

impl ProbeConfig {
    pub fn new(vocab: Vocabulary, max_elements: usize) -> Self {
        let locator = LocatorConfig::new(vocab.num_categories()).desk_scale();
        Self {
            noise_levels: vec![0.1, 0.2, 0.5],
            tagger: TaggerConfig::new(vocab, max_elements),
            locator,
            tagger_steps: 400,
            locator_steps: 300,
            eval_fraction: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_levels.is_empty() {
            return Err(Error::config("the probe needs at least one noise range"));
        }
        for &r in &self.noise_levels {
            if !(r.is_finite() && r > 0.0 && r <= 1.0) {
                return Err(Error::config(format!("noise range {r} must lie in (0, 1]")));
            }
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::config(format!(
                "eval fraction {} must lie strictly inside (0, 1)",
                self.eval_fraction
            )));
        }
        if self.tagger_steps == 0 || self.locator_steps == 0 {
            return Err(Error::config("both classifiers need at least one training step"));
        }
        if self.tagger.vocab.num_categories() != self.locator.num_categories {
            return Err(Error::config(format!(
                "tagger sees {} categories but the locator renders {}",
                self.tagger.vocab.num_categories(),
                self.locator.num_categories
            )));
        }
        self.tagger.validate()?;
        self.locator.validate()
    }
}

// ============================================================================
// Report
// ============================================================================

/// Which representation a probe row scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeSpace {
    /// Token-sequence tagger.
    Object,
    /// Rendered-wireframe locator.
    Pixel,
}

impl std::fmt::Display for ProbeSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProbeSpace::Object => write!(f, "object"),
            ProbeSpace::Pixel => write!(f, "pixel"),
        }
    }
}

/// One classifier's attribute-flag scores at one noise range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub space: ProbeSpace,
    pub noise: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Full probe table plus the dataset sizes behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
    pub train_records: usize,
    pub eval_records: usize,
    pub tagger_steps: usize,
    pub locator_steps: usize,
}

impl ProbeReport {
    /// The row for one (space, noise) cell, if the sweep produced it.
    pub fn row(&self, space: ProbeSpace, noise: f64) -> Option<&ProbeRow> {
        self.rows.iter().find(|r| r.space == space && r.noise == noise)
    }
}

// ============================================================================
// Sweep
// ============================================================================

/// Perturbs every layout once, pairing each noisy copy with its exact
/// ground-truth flags.
fn build_records(layouts: &[&Layout], noise: f64, seed: u64) -> Vec<LocatorRecord> {
    layouts
        .iter()
        .enumerate()
        .map(|(i, layout)| {
            let (noisy, flags) =
                perturb(layout, noise, derive_seed_idx(seed, "perturb", i as u64));
            LocatorRecord {
                source_id: format!("probe-{i}"),
                iteration: 1,
                layout: noisy,
                annotation: MaskAnnotation { flags },
            }
        })
        .collect()
}

/// Runs the sweep: one perturbed train/eval dataset pair per noise range,
/// both classifiers trained on the same records, rows ordered
/// object-then-pixel within each noise range. `on_row` fires as each row
/// completes.
pub fn run_probe(
    layouts: &[Layout],
    cfg: &ProbeConfig,
    seed: u64,
    par: Parallelism,
    mut on_row: impl FnMut(&ProbeRow),
) -> Result<ProbeReport> {
    cfg.validate()?;
    let usable: Vec<&Layout> = layouts
        .iter()
        .filter(|l| !l.is_empty() && l.len() <= cfg.tagger.max_elements)
        .collect();
    let eval_count = ((usable.len() as f64 * cfg.eval_fraction).round() as usize).max(1);
    if usable.len() < eval_count + 1 {
        return Err(Error::data(format!(
            "{} usable layouts cannot fill a train split plus {eval_count} held out",
            usable.len()
        )));
    }
    let (train, eval) = usable.split_at(usable.len() - eval_count);

    let mut rows = Vec::with_capacity(2 * cfg.noise_levels.len());
    for &noise in &cfg.noise_levels {
        let train_records =
            build_records(train, noise, derive_seed(seed, &format!("probe-train-{noise}")));
        let eval_records =
            build_records(eval, noise, derive_seed(seed, &format!("probe-eval-{noise}")));

        let (tagger, _) = train_tagger(
            &train_records,
            &cfg.tagger,
            cfg.tagger_steps,
            derive_seed(seed, &format!("probe-tagger-{noise}")),
            par,
            |_, _| {},
        )?;
        let scores = evaluate_tagger(&tagger, &eval_records, par)?;
        let row = ProbeRow {
            space: ProbeSpace::Object,
            noise,
            precision: scores.precision,
            recall: scores.recall,
            f1: scores.f1,
        };
        on_row(&row);
        rows.push(row);

        let (locator, _) = train_locator(
            &train_records,
            &cfg.locator,
            cfg.locator_steps,
            derive_seed(seed, &format!("probe-locator-{noise}")),
            par,
            |_, _| {},
        )?;
        let scores = evaluate_locator(&locator, &eval_records, par)?;
        let row = ProbeRow {
            space: ProbeSpace::Pixel,
            noise,
            precision: scores.precision,
            recall: scores.recall,
            f1: scores.f1,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(ProbeReport {
        rows,
        train_records: train.len(),
        eval_records: eval.len(),
        tagger_steps: cfg.tagger_steps,
        locator_steps: cfg.locator_steps,
    })
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{synthesize_corpus, SynthConfig};
    use crate::layout::CategorySchema;

    fn tiny_vocab() -> Vocabulary {
        Vocabulary::new(&CategorySchema::synthetic(), 16).unwrap()
    }

    fn tiny_config() -> ProbeConfig {
        let mut cfg = ProbeConfig::new(tiny_vocab(), 9);
        cfg.noise_levels = vec![0.1, 0.5];
        cfg.tagger.num_layers = 1;
        cfg.tagger.model_dim = 16;
        cfg.tagger.num_heads = 2;
        cfg.tagger.batch_size = 2;
        cfg.locator.base_channels = 4;
        cfg.locator.image_size = 32;
        cfg.locator.pool = 2;
        cfg.locator.proposal_count = 8;
        cfg.locator.head_width = 16;
        cfg.locator.batch_size = 2;
        cfg.tagger_steps = 2;
        cfg.locator_steps = 2;
        cfg
    }

    fn corpus(count: usize, seed: u64) -> Vec<Layout> {
        synthesize_corpus(&SynthConfig::default(), count, seed)
            .into_iter()
            .map(|r| r.layout)
            .collect()
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = tiny_config();
        cfg.noise_levels.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.noise_levels = vec![0.0];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.eval_fraction = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.locator.num_categories = 5;
        assert!(cfg.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn perturbed_records_carry_exact_flags() {
        let layouts = corpus(4, 7);
        let refs: Vec<&Layout> = layouts.iter().collect();
        let records = build_records(&refs, 0.3, 99);
        assert_eq!(records.len(), 4);
        for (i, (record, original)) in records.iter().zip(&layouts).enumerate() {
            assert_eq!(record.source_id, format!("probe-{i}"));
            assert_eq!(record.iteration, 1);
            assert_eq!(record.layout.len(), original.len());
            // A flag is set exactly where the value moved.
            for (e, flags) in record.annotation.flags.iter().enumerate() {
                let noisy = &record.layout.elements[e];
                let clean = &original.elements[e];
                let moved = [
                    noisy.x != clean.x,
                    noisy.y != clean.y,
                    noisy.w != clean.w,
                    noisy.h != clean.h,
                ];
                assert_eq!(*flags, moved);
            }
        }
        // Same seed rebuilds the same records.
        assert_eq!(records, build_records(&refs, 0.3, 99));
    }

    #[test]
    fn sweep_tabulates_both_spaces_at_every_noise() {
        let layouts = corpus(8, 13);
        let cfg = tiny_config();
        let mut seen = Vec::new();
        let report = run_probe(&layouts, &cfg, 5, Parallelism::Sequential, |row| {
            seen.push(row.clone());
        })
        .unwrap();
        assert_eq!(report.rows.len(), 4);
        assert_eq!(seen, report.rows);
        assert_eq!(report.train_records + report.eval_records, 8);
        assert_eq!(report.eval_records, 2);
        for (i, &noise) in cfg.noise_levels.iter().enumerate() {
            assert_eq!(report.rows[2 * i].space, ProbeSpace::Object);
            assert_eq!(report.rows[2 * i].noise, noise);
            assert_eq!(report.rows[2 * i + 1].space, ProbeSpace::Pixel);
            assert_eq!(report.rows[2 * i + 1].noise, noise);
        }
        for row in &report.rows {
            for v in [row.precision, row.recall, row.f1] {
                assert!((0.0..=1.0).contains(&v), "{row:?}");
            }
        }
        assert!(report.row(ProbeSpace::Pixel, 0.5).is_some());
        assert!(report.row(ProbeSpace::Pixel, 0.2).is_none());
    }

    #[test]
    fn sweep_is_reproducible_across_execution_modes() {
        let layouts = corpus(6, 29);
        let mut cfg = tiny_config();
        cfg.noise_levels = vec![0.2];
        let a = run_probe(&layouts, &cfg, 11, Parallelism::Sequential, |_| {}).unwrap();
        let b = run_probe(&layouts, &cfg, 11, Parallelism::Parallel, |_| {}).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn report_round_trips_through_json() {
        let layouts = corpus(6, 31);
        let mut cfg = tiny_config();
        cfg.noise_levels = vec![0.1];
        let report = run_probe(&layouts, &cfg, 3, Parallelism::Sequential, |_| {}).unwrap();
        let json = serde_json::to_string_pretty(&report).unwrap();
        let parsed: ProbeReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn sweep_rejects_corpora_too_small_to_split() {
        let layouts = corpus(1, 37);
        let cfg = tiny_config();
        assert!(run_probe(&layouts, &cfg, 3, Parallelism::Sequential, |_| {}).is_err());
    }
}
