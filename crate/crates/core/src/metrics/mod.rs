//! Layout quality metrics: Overlap, Alignment, Maximum IoU, and Fréchet
//! feature distance over learned sequence/pixel embeddings.
//!
//! Overlap and Alignment are intrinsic (one corpus); Maximum IoU and the
//! Fréchet distances compare a generated corpus against a real one. Overlap
//! and Alignment are reported on a x100 scale.

pub mod features;

use crate::error::{Error, Result};
use crate::exec::{map_indices, Parallelism};
use crate::layout::{Element, Layout};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

// ==================== geometry primitives ====================

/// Intersection-over-union of two boxes; 0 when the union has no area.
pub fn iou(a: &Element, b: &Element) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    // Areas go through the same corner arithmetic as the intersection so
    // that bitwise-equal boxes score exactly 1.
    let area_a = (a.right() - a.x) * (a.bottom() - a.y);
    let area_b = (b.right() - b.x) * (b.bottom() - b.y);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Area of the box intersection (0 for disjoint boxes).
pub fn intersection_area(a: &Element, b: &Element) -> f64 {
    let w = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let h = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    w * h
}

// ==================== overlap ====================

/// Overlap value together with the count of skipped zero-area pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapOutcome {
    pub value: f64,
    pub skipped_pairs: usize,
}

/// Mean over layouts of the summed pairwise overlap ratio, x100.
///
/// For each ordered pair `(i, j)`, `i != j`, the contribution is
/// `area(e_i ∩ e_j) / area(e_i)`. With `same_category_only` the sum is
/// restricted to pairs sharing a category. Pairs whose first element has
/// zero area are skipped and counted.
pub fn overlap_outcome(
    layouts: &[Layout],
    same_category_only: bool,
    par: Parallelism,
) -> OverlapOutcome {
    if layouts.is_empty() {
        return OverlapOutcome { value: 0.0, skipped_pairs: 0 };
    }
    let per_layout = map_indices(par, layouts.len(), |li| {
        let l = &layouts[li];
        let mut sum = 0.0;
        let mut skipped = 0usize;
        for (i, ei) in l.elements.iter().enumerate() {
            for (j, ej) in l.elements.iter().enumerate() {
                if i == j || (same_category_only && ei.category != ej.category) {
                    continue;
                }
                if ei.area() <= 0.0 {
                    skipped += 1;
                    continue;
                }
                sum += intersection_area(ei, ej) / ei.area();
            }
        }
        (sum, skipped)
    });
    let total: f64 = per_layout.iter().map(|(s, _)| s).sum();
    let skipped = per_layout.iter().map(|(_, k)| k).sum();
    OverlapOutcome { value: 100.0 * total / layouts.len() as f64, skipped_pairs: skipped }
}

/// All-pairs overlap, x100.
pub fn overlap(layouts: &[Layout], par: Parallelism) -> f64 {
    overlap_outcome(layouts, false, par).value
}

/// Same-category-pairs overlap, x100.
pub fn overlap_same_category(layouts: &[Layout], par: Parallelism) -> f64 {
    overlap_outcome(layouts, true, par).value
}

/// Integer-lattice reference for [`overlap`]: boxes snap to a `grid`-sized
/// raster with the renderer's rounding, and each pair contributes its
/// intersection pixel count over the first box's pixel count.
pub fn overlap_pixel_oracle(layouts: &[Layout], grid: usize, par: Parallelism) -> f64 {
    if layouts.is_empty() {
        return 0.0;
    }
    let per_layout = map_indices(par, layouts.len(), |li| {
        let l = &layouts[li];
        let boxes: Vec<(usize, usize, usize, usize)> =
            l.elements.iter().map(|e| crate::render::pixel_box(e, grid, grid)).collect();
        let mut sum = 0.0;
        for (i, ei) in l.elements.iter().enumerate() {
            for j in 0..l.elements.len() {
                if i == j || ei.area() <= 0.0 {
                    continue;
                }
                let (ax0, ax1, ay0, ay1) = boxes[i];
                let (bx0, bx1, by0, by1) = boxes[j];
                let iw = ax1.min(bx1).saturating_sub(ax0.max(bx0));
                let ih = ay1.min(by1).saturating_sub(ay0.max(by0));
                let own = (ax1 - ax0) * (ay1 - ay0);
                sum += (iw * ih) as f64 / own as f64;
            }
        }
        sum
    });
    100.0 * per_layout.iter().sum::<f64>() / layouts.len() as f64
}

// ==================== alignment ====================

const ALIGNMENT_EPS: f64 = 1e-6;

/// Mean anchor-misalignment score, x100.
///
/// Each element contributes `-ln(1 - d)` where `d` is the smallest absolute
/// gap between one of its six anchor lines (left, x-center, right, top,
/// y-center, bottom) and the same anchor of any other element. Layouts
/// average over elements, the corpus averages over layouts. Single-element
/// layouts contribute 0.
pub fn alignment(layouts: &[Layout], par: Parallelism) -> f64 {
    if layouts.is_empty() {
        return 0.0;
    }
    let per_layout = map_indices(par, layouts.len(), |li| alignment_of(&layouts[li]));
    100.0 * per_layout.iter().sum::<f64>() / layouts.len() as f64
}

fn alignment_of(layout: &Layout) -> f64 {
    let n = layout.len();
    if n < 2 {
        return 0.0;
    }
    let anchors: Vec<[f64; 6]> = layout
        .elements
        .iter()
        .map(|e| {
            let (cx, cy) = e.center();
            [e.x, cx, e.right(), e.y, cy, e.bottom()]
        })
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        let mut d = f64::INFINITY;
        for (j, other) in anchors.iter().enumerate() {
            if j == i {
                continue;
            }
            for k in 0..6 {
                d = d.min((anchors[i][k] - other[k]).abs());
            }
        }
        total += -(1.0 - d.min(1.0 - ALIGNMENT_EPS)).ln();
    }
    total / n as f64
}

// ==================== maximum IoU ====================

/// Similarity of a generated layout set to a reference set in `[0, 1]`.
///
/// Each generated layout scores the best reference sharing its exact
/// category multiset, where "best" maximizes the mean pairwise IoU under an
/// optimal within-category element assignment; layouts with no compatible
/// reference score 0. The result is the mean over generated layouts.
pub fn max_iou(generated: &[Layout], reference: &[Layout], par: Parallelism) -> f64 {
    if generated.is_empty() {
        return 0.0;
    }
    // Group references by category multiset once.
    let mut by_multiset: std::collections::HashMap<Vec<usize>, Vec<usize>> =
        std::collections::HashMap::new();
    for (i, r) in reference.iter().enumerate() {
        by_multiset.entry(r.category_multiset()).or_default().push(i);
    }
    let scores = map_indices(par, generated.len(), |gi| {
        let g = &generated[gi];
        let Some(candidates) = by_multiset.get(&g.category_multiset()) else {
            return 0.0;
        };
        candidates
            .iter()
            .map(|&ri| layout_pair_max_iou(g, &reference[ri]))
            .fold(0.0f64, f64::max)
    });
    scores.iter().sum::<f64>() / generated.len() as f64
}

/// Mean pairwise IoU of `g` against `r` under the best category-respecting
/// assignment. Both layouts must share a category multiset.
pub fn layout_pair_max_iou(g: &Layout, r: &Layout) -> f64 {
    debug_assert_eq!(g.category_multiset(), r.category_multiset());
    let n = g.len();
    // Solve each category block independently: cross-category pairs are
    // forbidden, so the assignment decomposes.
    let mut cats: Vec<usize> = g.category_multiset();
    cats.dedup();
    let mut total = 0.0;
    for cat in cats {
        let gi: Vec<usize> =
            (0..n).filter(|&i| g.elements[i].category == cat).collect();
        let ri: Vec<usize> =
            (0..r.len()).filter(|&i| r.elements[i].category == cat).collect();
        let k = gi.len();
        let mut cost = Array2::<f64>::zeros((k, k));
        for a in 0..k {
            for b in 0..k {
                cost[[a, b]] = -iou(&g.elements[gi[a]], &r.elements[ri[b]]);
            }
        }
        let (_, neg_iou_sum) = crate::matching::minimize_assignment(&cost);
        total += -neg_iou_sum;
    }
    total / n as f64
}

// ==================== Fréchet distance ====================

/// Mean and covariance (unbiased, `N - 1` normalization) of row-vector
/// samples.
pub fn fit_gaussian(samples: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let (n, d) = samples.dim();
    if n < 2 {
        return Err(Error::data(format!("need >= 2 samples to fit a Gaussian, got {n}")));
    }
    let mean = samples.mean_axis(ndarray::Axis(0)).expect("n >= 2");
    let centered = &samples - &mean.view().insert_axis(ndarray::Axis(0));
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    debug_assert_eq!(cov.dim(), (d, d));
    Ok((mean, cov))
}

/// Fréchet distance between two Gaussians:
/// `‖μ1 − μ2‖² + tr(Σ1 + Σ2 − 2·(Σ1 Σ2)^½)`.
///
/// The matrix square root is taken through symmetric eigendecompositions
/// (`(Σ1 Σ2)^½` via `Σ1^½ Σ2 Σ1^½`); eigenvalues below `-1e-6` indicate a
/// non-PSD input and fail, smaller negatives clamp to zero.
pub fn frechet_distance(
    mu1: ArrayView1<'_, f64>,
    sigma1: ArrayView2<'_, f64>,
    mu2: ArrayView1<'_, f64>,
    sigma2: ArrayView2<'_, f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || sigma1.dim() != (d, d) || sigma2.dim() != (d, d) {
        return Err(Error::data("Gaussian parameter shapes disagree"));
    }
    let diff: f64 = mu1
        .iter()
        .zip(mu2.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();

    let s1 = to_na(sigma1);
    let s2 = to_na(sigma2);
    let root1 = psd_sqrt(&symmetrize(&s1))?;
    let inner = symmetrize(&(&root1 * &s2 * &root1));
    let cross = psd_sqrt(&inner)?;

    let value = diff + s1.trace() + s2.trace() - 2.0 * cross.trace();
    if value < -1e-6 {
        return Err(Error::Numerical(format!("Fréchet distance collapsed to {value}")));
    }
    Ok(value.max(0.0))
}

fn to_na(a: ArrayView2<'_, f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn symmetrize(m: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Square root of a symmetric PSD matrix by eigendecomposition.
fn psd_sqrt(m: &nalgebra::DMatrix<f64>) -> Result<nalgebra::DMatrix<f64>> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        if *v < -1e-6 {
            return Err(Error::Numerical(format!(
                "matrix square root hit eigenvalue {v}; input is not PSD"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let scaled = &eig.eigenvectors * nalgebra::DMatrix::from_diagonal(&vals);
    Ok(scaled * eig.eigenvectors.transpose())
}

// ==================== report ====================

/// Bundle of every evaluation number for one generated-vs-real comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overlap_all: f64,
    pub overlap_same_category: f64,
    pub alignment: f64,
    pub max_iou: f64,
    pub seq_fid: Option<f64>,
    pub pixel_fid: Option<f64>,
    pub num_generated: usize,
    pub num_real: usize,
    pub overlap_skipped_pairs: usize,
    /// Set when either side has fewer samples than the feature dimension,
    /// making the fitted Gaussians rank-deficient.
    pub low_sample_warning: bool,
    pub config_hash: String,
}
