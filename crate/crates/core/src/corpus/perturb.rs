//! Attribute-level noise with exact ground-truth flags, used to build the
//! probe datasets and the feature-extractor training pairs.

use crate::layout::Layout;
use crate::util::rng_from_seed;
use rand::Rng;

/// Smallest width/height a perturbed element may clamp down to (half a bin
/// at 128 bins), keeping boxes drawable and encodable.
pub const MIN_SIZE: f64 = 0.5 / 128.0;

/// Adds `Uniform(-r, r)` noise to a random attribute subset of roughly half
/// the elements; positions clamp to `[0, 1]`, sizes to `[MIN_SIZE, 1]`.
///
/// Returns the noisy layout and per-element `[x, y, w, h]` flags marking
/// exactly the attributes whose values actually changed (an attribute that
/// was selected but clamped back to its original value is not flagged).
/// Deterministic given `seed`.
pub fn perturb(layout: &Layout, noise: f64, seed: u64) -> (Layout, Vec<[bool; 4]>) {
    assert!(noise >= 0.0, "noise range must be non-negative");
    let mut rng = rng_from_seed(seed);
    let mut out = layout.clone();
    let mut flags = vec![[false; 4]; layout.len()];
    for (i, e) in out.elements.iter_mut().enumerate() {
        if !rng.gen_bool(0.5) {
            continue;
        }
        // Non-empty attribute subset, each attribute with probability 0.5.
        let mut subset = [false; 4];
        while !subset.iter().any(|&b| b) {
            for s in subset.iter_mut() {
                *s = rng.gen_bool(0.5);
            }
        }
        for (k, &selected) in subset.iter().enumerate() {
            if !selected {
                continue;
            }
            let delta = if noise > 0.0 { rng.gen_range(-noise..noise) } else { 0.0 };
            let (old, new) = match k {
                0 => (e.x, (e.x + delta).clamp(0.0, 1.0)),
                1 => (e.y, (e.y + delta).clamp(0.0, 1.0)),
                2 => (e.w, (e.w + delta).clamp(MIN_SIZE, 1.0)),
                _ => (e.h, (e.h + delta).clamp(MIN_SIZE, 1.0)),
            };
            match k {
                0 => e.x = new,
                1 => e.y = new,
                2 => e.w = new,
                _ => e.h = new,
            }
            flags[i][k] = new != old;
        }
    }
    (out, flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{synthesize_corpus, SynthConfig};
    use crate::exec::Parallelism;
    use crate::layout::Element;
    use crate::metrics::overlap;

    fn sample() -> Layout {
        Layout::new(vec![
            Element::new(0, 0.1, 0.1, 0.3, 0.1),
            Element::new(1, 0.1, 0.3, 0.3, 0.5),
            Element::new(2, 0.5, 0.3, 0.4, 0.5),
        ])
    }

    #[test]
    fn seeded_perturbation_is_deterministic() {
        let l = sample();
        assert_eq!(perturb(&l, 0.2, 9), perturb(&l, 0.2, 9));
        assert_ne!(perturb(&l, 0.2, 9).0, perturb(&l, 0.2, 10).0);
    }

    #[test]
    fn zero_noise_changes_nothing_and_flags_nothing() {
        let l = sample();
        let (noisy, flags) = perturb(&l, 0.0, 4);
        assert_eq!(noisy, l);
        assert!(flags.iter().all(|f| f.iter().all(|&b| !b)));
    }

    #[test]
    fn flags_mark_exactly_the_changed_attributes() {
        let l = sample();
        for seed in 0..50 {
            let (noisy, flags) = perturb(&l, 0.3, seed);
            for i in 0..l.len() {
                let a = l.elements[i];
                let b = noisy.elements[i];
                assert_eq!(flags[i][0], a.x != b.x);
                assert_eq!(flags[i][1], a.y != b.y);
                assert_eq!(flags[i][2], a.w != b.w);
                assert_eq!(flags[i][3], a.h != b.h);
                assert_eq!(a.category, b.category, "categories are never perturbed");
            }
        }
    }

    #[test]
    fn values_stay_in_domain() {
        let l = Layout::new(vec![Element::new(0, 0.01, 0.99, 0.02, 0.02)]);
        for seed in 0..100 {
            let (noisy, _) = perturb(&l, 0.5, seed);
            let e = noisy.elements[0];
            assert!((0.0..=1.0).contains(&e.x) && (0.0..=1.0).contains(&e.y));
            assert!(e.w >= MIN_SIZE && e.w <= 1.0 && e.h >= MIN_SIZE && e.h <= 1.0);
        }
    }

    #[test]
    fn strong_noise_raises_overlap_of_the_grid_corpus() {
        let cfg = SynthConfig::default();
        let layouts: Vec<Layout> =
            synthesize_corpus(&cfg, 100, 21).into_iter().map(|r| r.layout).collect();
        let clean = overlap(&layouts, Parallelism::Sequential);
        let noisy: Vec<Layout> = layouts
            .iter()
            .enumerate()
            .map(|(i, l)| perturb(l, 0.5, 1000 + i as u64).0)
            .collect();
        let perturbed = overlap(&noisy, Parallelism::Sequential);
        assert!(
            perturbed > clean + 1.0,
            "expected a clear overlap increase: clean {clean}, noisy {perturbed}"
        );
    }
}
