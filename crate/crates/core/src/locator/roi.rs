//! Region primitives: anchor grids, box regression coding, bilinear region
//! pooling, and non-maximum suppression.
//!
//! Boxes are `[x, y, w, h]` in normalized canvas coordinates throughout,
//! matching layout elements.

use ndarray::{Array1, Array3};

use crate::nn::Scalar;

// ============================================================================
// Plain-array box geometry
// ============================================================================

/// Intersection-over-union of two `[x, y, w, h]` boxes.
pub fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ar, ab) = (a[0] + a[2], a[1] + a[3]);
    let (br, bb) = (b[0] + b[2], b[1] + b[3]);
    let iw = (ar.min(br) - a[0].max(b[0])).max(0.0);
    let ih = (ab.min(bb) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (ar - a[0]) * (ab - a[1]) + (br - b[0]) * (bb - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

// ============================================================================
// Anchors
// ============================================================================

/// One anchor per (cell, size, aspect) triple, centered on its grid cell.
///
/// `aspect` is width over height: an anchor of size `s` and aspect `a` has
/// width `s * sqrt(a)` and height `s / sqrt(a)`, so its area is `s^2`
/// regardless of shape. Anchors near the border may extend outside the
/// canvas; only decoded boxes are clamped. Ordering is row-major over cells
/// with the (size, aspect) index varying fastest, so anchor `k` of cell
/// `(i, j)` on a `H x W` grid sits at `(i * W + j) * A + k`.
pub fn anchor_grid(
    grid_h: usize,
    grid_w: usize,
    sizes: &[f64],
    aspects: &[f64],
) -> Vec<[f64; 4]> {
    let mut anchors = Vec::with_capacity(grid_h * grid_w * sizes.len() * aspects.len());
    for i in 0..grid_h {
        for j in 0..grid_w {
            let cx = (j as f64 + 0.5) / grid_w as f64;
            let cy = (i as f64 + 0.5) / grid_h as f64;
            for &s in sizes {
                for &a in aspects {
                    let w = s * a.sqrt();
                    let h = s / a.sqrt();
                    anchors.push([cx - w / 2.0, cy - h / 2.0, w, h]);
                }
            }
        }
    }
    anchors
}

// ============================================================================
// Box regression coding
// ============================================================================

/// Largest magnitude accepted for log-scale offsets when decoding, so a
/// wild regression output cannot overflow `exp`.
const MAX_LOG_SCALE: f64 = 4.0;

/// Center-form regression target of `gt` relative to `anchor`:
/// `(dcx / aw, dcy / ah, ln(gw / aw), ln(gh / ah))`.
pub fn encode_box(anchor: [f64; 4], gt: [f64; 4]) -> [f64; 4] {
    let (acx, acy) = (anchor[0] + anchor[2] / 2.0, anchor[1] + anchor[3] / 2.0);
    let (gcx, gcy) = (gt[0] + gt[2] / 2.0, gt[1] + gt[3] / 2.0);
    [
        (gcx - acx) / anchor[2],
        (gcy - acy) / anchor[3],
        (gt[2] / anchor[2]).ln(),
        (gt[3] / anchor[3]).ln(),
    ]
}

/// Inverse of [`encode_box`], with the result clipped to the canvas.
pub fn decode_box(anchor: [f64; 4], t: [f64; 4]) -> [f64; 4] {
    let (acx, acy) = (anchor[0] + anchor[2] / 2.0, anchor[1] + anchor[3] / 2.0);
    let cx = acx + t[0] * anchor[2];
    let cy = acy + t[1] * anchor[3];
    let w = anchor[2] * t[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = anchor[3] * t[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let x0 = (cx - w / 2.0).clamp(0.0, 1.0);
    let y0 = (cy - h / 2.0).clamp(0.0, 1.0);
    let x1 = (cx + w / 2.0).clamp(0.0, 1.0);
    let y1 = (cy + h / 2.0).clamp(0.0, 1.0);
    [x0, y0, (x1 - x0).max(0.0), (y1 - y0).max(0.0)]
}

// ============================================================================
// Region pooling
// ============================================================================

/// One bilinear tap: a feature-map cell and its interpolation weight.
#[derive(Debug, Clone, Copy)]
struct Tap {
    y: usize,
    x: usize,
    weight: f64,
}

/// Backward bookkeeping: the four taps of every pooled bin, shared by all
/// channels.
pub struct RoiCache {
    taps: Vec<[Tap; 4]>,
    pool: usize,
    channels: usize,
}

/// Pools a `pool x pool` feature patch from `features` (`[C, H, W]`) over
/// `bbox`, one bilinear sample at each bin center.
///
/// A normalized coordinate `u` lands on the feature grid at `u * W - 0.5`,
/// placing pixel centers at half-integer normalized positions; samples
/// beyond the border replicate the edge cell. The output is flattened
/// channel-major: `out[(c * pool + by) * pool + bx]`.
pub fn roi_align<T: Scalar>(
    features: &Array3<T>,
    bbox: [f64; 4],
    pool: usize,
) -> (Array1<T>, RoiCache) {
    let (channels, fh, fw) = features.dim();
    let mut taps = Vec::with_capacity(pool * pool);
    for by in 0..pool {
        for bx in 0..pool {
            let sx = bbox[0] + (bx as f64 + 0.5) * bbox[2] / pool as f64;
            let sy = bbox[1] + (by as f64 + 0.5) * bbox[3] / pool as f64;
            let gx = sx * fw as f64 - 0.5;
            let gy = sy * fh as f64 - 0.5;
            let x0 = gx.floor();
            let y0 = gy.floor();
            let (fx, fy) = (gx - x0, gy - y0);
            let clamp_x = |v: f64| (v.max(0.0) as usize).min(fw - 1);
            let clamp_y = |v: f64| (v.max(0.0) as usize).min(fh - 1);
            let (xl, xr) = (clamp_x(x0), clamp_x(x0 + 1.0));
            let (yt, yb) = (clamp_y(y0), clamp_y(y0 + 1.0));
            taps.push([
                Tap { y: yt, x: xl, weight: (1.0 - fy) * (1.0 - fx) },
                Tap { y: yt, x: xr, weight: (1.0 - fy) * fx },
                Tap { y: yb, x: xl, weight: fy * (1.0 - fx) },
                Tap { y: yb, x: xr, weight: fy * fx },
            ]);
        }
    }
    let mut out = Array1::zeros(channels * pool * pool);
    for c in 0..channels {
        for (bin, bin_taps) in taps.iter().enumerate() {
            let mut acc = T::zero();
            for tap in bin_taps {
                acc = acc + features[[c, tap.y, tap.x]] * T::from_f64_lossy(tap.weight);
            }
            out[c * pool * pool + bin] = acc;
        }
    }
    (out, RoiCache { taps, pool, channels })
}

/// Scatters a pooled-patch gradient back onto the feature map.
pub fn roi_align_backward<T: Scalar>(
    cache: &RoiCache,
    grad_out: &Array1<T>,
    feature_dim: (usize, usize, usize),
) -> Array3<T> {
    let mut grad = Array3::zeros(feature_dim);
    let bins = cache.pool * cache.pool;
    for c in 0..cache.channels {
        for (bin, bin_taps) in cache.taps.iter().enumerate() {
            let g = grad_out[c * bins + bin];
            for tap in bin_taps {
                grad[[c, tap.y, tap.x]] =
                    grad[[c, tap.y, tap.x]] + g * T::from_f64_lossy(tap.weight);
            }
        }
    }
    grad
}

// ============================================================================
// Non-maximum suppression
// ============================================================================

/// Greedy NMS: highest score first (ties to the lower index), suppressing
/// boxes whose IoU with any kept box exceeds `iou_thresh`. Returns kept
/// indices in score order.
pub fn nms(boxes: &[[f64; 4]], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        if kept.iter().all(|&k| box_iou(boxes[idx], boxes[k]) <= iou_thresh) {
            kept.push(idx);
        }
    }
    kept
}
