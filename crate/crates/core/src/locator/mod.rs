//! Detection-based mask locator for rendered wireframes.
//!
//! The locator looks at a rendered layout and decides, per element and per
//! attribute, which tokens an editing pass should re-predict. The pixel
//! variant is a small two-stage detector: a residual backbone produces a
//! feature grid, a proposal head scores anchor boxes, and per-region heads
//! refine boxes, score objectness, and emit four per-attribute error
//! probabilities (x, y, w, h). Detections are associated back to layout
//! elements by overlap, mirroring how the training labels were produced.
//! An object-space ablation (`tagger`) reads token sequences instead of
//! pixels and shares the annotation contract.

pub mod backbone;
pub mod data;
pub mod loss;
pub mod roi;
pub mod tagger;

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_items, Parallelism};
use crate::matching::MaskAnnotation;
use crate::nn::conv::ConvCache;
use crate::nn::{relu, relu_backward, sigmoid, AdamW, Checkpoint, Conv2d, Grads, Linear, ParamSet, Scalar};
use crate::refine::MaskScorer;
use crate::render::{render_wireframe, RenderConfig, WireframeImage};
use crate::util::{derive_seed, rng_from_seed};

use backbone::{relu3, relu3_backward, Backbone, BackboneDepth};
use loss::{bce_with_logits, match_anchors, match_proposals, smooth_l1};
use roi::{anchor_grid, box_iou, decode_box, encode_box, nms, roi_align, roi_align_backward, RoiCache};

pub use backbone::BackboneDepth as Depth;
pub use data::{build_locator_dataset, load_locator_dataset, save_locator_dataset, DatasetCoverage, LocatorRecord};
pub use tagger::{
    evaluate_tagger, load_tagger, save_tagger, train_tagger, ObjectTagger, TaggerConfig,
};

// ============================================================================
// Configuration
// ============================================================================

/// Checkpoint kind tag for the pixel locator.
pub const LOCATOR_KIND: &str = "locator";

/// How many top-scoring anchor boxes enter proposal suppression.
const PRE_NMS_TOP: usize = 128;
/// Suppression threshold among proposals (looser than the final one so
/// near-duplicate regions still compete in the second stage).
const RPN_NMS_IOU: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocatorConfig {
    /// Category count of the layouts this locator reads; fixes the render
    /// palette.
    pub num_categories: usize,
    pub backbone: BackboneDepth,
    pub base_channels: usize,
    /// Square render resolution the detector consumes.
    pub image_size: usize,
    /// Side of the pooled per-region patch.
    pub pool: usize,
    /// Regions kept after proposal suppression.
    pub proposal_count: usize,
    /// Width of the shared per-region hidden layer.
    pub head_width: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Anchor areas are `size^2`; aspect is width over height.
    pub anchor_sizes: Vec<f64>,
    pub anchor_aspects: Vec<f64>,
    /// Minimum IoU for associating a detection with a layout element.
    pub assoc_iou: f64,
    /// Final suppression threshold over refined detections.
    pub nms_iou: f64,
    /// Detections below this objectness are discarded.
    pub score_threshold: f64,
}

impl LocatorConfig {
    /// Full-scale profile.
    pub fn new(num_categories: usize) -> Self {
        Self {
            num_categories,
            backbone: BackboneDepth::Depth50,
            base_channels: 64,
            image_size: 224,
            pool: 7,
            proposal_count: 64,
            head_width: 256,
            learning_rate: 1e-4,
            batch_size: 128,
            beta1: 0.9,
            beta2: 0.98,
            anchor_sizes: vec![0.15, 0.3, 0.55],
            anchor_aspects: vec![0.25, 1.0, 4.0],
            assoc_iou: 0.3,
            nms_iou: 0.5,
            score_threshold: 0.5,
        }
    }

    /// Shrinks the profile so training fits a single CPU core.
    pub fn desk_scale(mut self) -> Self {
        self.backbone = BackboneDepth::Depth18;
        self.base_channels = 8;
        self.image_size = 64;
        self.pool = 4;
        self.proposal_count = 32;
        self.head_width = 128;
        self.batch_size = 8;
        self
    }

    /// Anchors per feature-grid cell.
    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len() * self.anchor_aspects.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_categories == 0 {
            return Err(Error::config("locator needs at least one category"));
        }
        let stride = self.backbone.feature_stride();
        if self.image_size == 0 || self.image_size % stride != 0 {
            return Err(Error::config(format!(
                "image size {} is not a positive multiple of the feature stride {stride}",
                self.image_size
            )));
        }
        if self.base_channels == 0
            || self.pool == 0
            || self.proposal_count == 0
            || self.head_width == 0
            || self.batch_size == 0
        {
            return Err(Error::config("locator dimensions must be positive"));
        }
        if self.anchor_sizes.is_empty() || self.anchor_aspects.is_empty() {
            return Err(Error::config("anchor shape lists must be non-empty"));
        }
        if self.anchor_sizes.iter().chain(&self.anchor_aspects).any(|&v| v <= 0.0) {
            return Err(Error::config("anchor sizes and aspects must be positive"));
        }
        for (name, v) in [
            ("association IoU", self.assoc_iou),
            ("suppression IoU", self.nms_iou),
            ("score threshold", self.score_threshold),
        ] {
            if !(0.0 < v && v < 1.0) {
                return Err(Error::config(format!("{name} {v} must lie strictly inside (0, 1)")));
            }
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

// ============================================================================
// Detections and association
// ============================================================================

/// One detected region: where it is, how confident the detector is that a
/// real element sits there, and per-attribute error probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `[x, y, w, h]` in canvas coordinates.
    pub bbox: [f64; 4],
    pub objectness: f64,
    /// Probability that each of (x, y, w, h) needs re-prediction.
    pub attr_probs: [f64; 4],
}

/// Greedily assigns detections to element boxes and merges their
/// per-attribute probabilities.
///
/// Detections are visited in descending objectness (ties to the lower
/// index). Each claims the highest-IoU element not yet claimed, provided
/// the IoU reaches `min_iou`; failing that it merges into the best
/// already-claimed element (element-wise max of probabilities); failing
/// that too, it is dropped as spurious. Elements no detection touches get
/// all-zero probabilities.
pub fn associate_probs(
    detections: &[Detection],
    element_boxes: &[[f64; 4]],
    min_iou: f64,
) -> Vec<[f64; 4]> {
    let mut probs = vec![[0.0f64; 4]; element_boxes.len()];
    let mut claimed = vec![false; element_boxes.len()];
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .objectness
            .partial_cmp(&detections[a].objectness)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for d in order {
        let det = &detections[d];
        let best = |want_claimed: bool| -> Option<usize> {
            let mut best: Option<(usize, f64)> = None;
            for (e, &bbox) in element_boxes.iter().enumerate() {
                if claimed[e] != want_claimed {
                    continue;
                }
                let v = box_iou(det.bbox, bbox);
                if v >= min_iou && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((e, v));
                }
            }
            best.map(|(e, _)| e)
        };
        if let Some(e) = best(false) {
            claimed[e] = true;
            probs[e] = det.attr_probs;
        } else if let Some(e) = best(true) {
            for k in 0..4 {
                probs[e][k] = probs[e][k].max(det.attr_probs[k]);
            }
        }
    }
    probs
}

/// [`associate_probs`] thresholded at one half into a mask annotation.
pub fn associate(
    detections: &[Detection],
    element_boxes: &[[f64; 4]],
    min_iou: f64,
) -> MaskAnnotation {
    let flags = associate_probs(detections, element_boxes, min_iou)
        .into_iter()
        .map(|p| [p[0] > 0.5, p[1] > 0.5, p[2] > 0.5, p[3] > 0.5])
        .collect();
    MaskAnnotation { flags }
}

// ============================================================================
// The pixel locator
// ============================================================================

pub struct PixelLocator<T: Scalar> {
    cfg: LocatorConfig,
    params: ParamSet<T>,
    backbone: Backbone,
    rpn_conv: Conv2d,
    rpn_obj: Conv2d,
    rpn_box: Conv2d,
    head_fc: Linear,
    head_obj: Linear,
    head_box: Linear,
    head_attr: Linear,
    anchors: Vec<[f64; 4]>,
    grid: usize,
}

struct RpnCache<T> {
    conv: ConvCache<T>,
    /// Pre-ReLU shared hidden map.
    pre: Array3<T>,
    obj: ConvCache<T>,
    boxes: ConvCache<T>,
}

/// Per-term loss means of one training example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn_objectness: f64,
    pub rpn_box: f64,
    pub region_objectness: f64,
    pub region_box: f64,
    pub region_attributes: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.rpn_objectness
            + self.rpn_box
            + self.region_objectness
            + self.region_box
            + self.region_attributes
    }
}

fn image_tensor<T: Scalar>(image: &WireframeImage) -> Array3<T> {
    let (h, w) = (image.height(), image.width());
    let view = image.view();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| T::from_f64_lossy(view[[y, x, c]] as f64))
}

fn f64_of<T: Scalar>(v: T) -> f64 {
    v.to_f64().expect("every scalar converts to f64")
}

impl<T: Scalar> PixelLocator<T> {
    pub fn new(cfg: LocatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = rng_from_seed(seed);
        let backbone = Backbone::init(
            &mut params,
            &mut rng,
            "backbone",
            cfg.backbone,
            cfg.base_channels,
        );
        let c = backbone.out_channels();
        let a = cfg.anchors_per_cell();
        let rpn_conv = Conv2d::init(&mut params, &mut rng, "rpn.conv", c, c, 3, 1, 1);
        let rpn_obj = Conv2d::init_zero(&mut params, "rpn.obj", c, a, 1, 1, 0);
        let rpn_box = Conv2d::init_zero(&mut params, "rpn.box", c, 4 * a, 1, 1, 0);
        let pooled = c * cfg.pool * cfg.pool;
        let head_fc = Linear::init(&mut params, &mut rng, "head.fc", pooled, cfg.head_width, true);
        let head_obj = Linear::init_zero(&mut params, "head.obj", cfg.head_width, 1, true);
        let head_box = Linear::init_zero(&mut params, "head.box", cfg.head_width, 4, true);
        let head_attr = Linear::init_zero(&mut params, "head.attr", cfg.head_width, 4, true);
        let grid = cfg.image_size / cfg.backbone.feature_stride();
        let anchors = anchor_grid(grid, grid, &cfg.anchor_sizes, &cfg.anchor_aspects);
        Ok(Self {
            cfg,
            params,
            backbone,
            rpn_conv,
            rpn_obj,
            rpn_box,
            head_fc,
            head_obj,
            head_box,
            head_attr,
            anchors,
            grid,
        })
    }

    pub fn config(&self) -> &LocatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn check_image(&self, image: &WireframeImage) -> Result<()> {
        if image.height() != self.cfg.image_size || image.width() != self.cfg.image_size {
            return Err(Error::config(format!(
                "locator expects a {0}x{0} render, got {1}x{2}",
                self.cfg.image_size,
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    fn rpn_forward(&self, feat: &Array3<T>) -> (Array3<T>, Array3<T>, RpnCache<T>) {
        let (pre, conv) = self.rpn_conv.forward(&self.params, feat);
        let mut hidden = pre.clone();
        relu3(&mut hidden);
        let (obj_map, obj) = self.rpn_obj.forward(&self.params, &hidden);
        let (box_map, boxes) = self.rpn_box.forward(&self.params, &hidden);
        (obj_map, box_map, RpnCache { conv, pre, obj, boxes })
    }

    /// Decodes every anchor's score and box, in anchor-grid order.
    fn decode_rpn(&self, obj_map: &Array3<T>, box_map: &Array3<T>) -> (Vec<f64>, Vec<[f64; 4]>) {
        let a = self.cfg.anchors_per_cell();
        let mut scores = Vec::with_capacity(self.anchors.len());
        let mut boxes = Vec::with_capacity(self.anchors.len());
        for i in 0..self.grid {
            for j in 0..self.grid {
                for k in 0..a {
                    let idx = (i * self.grid + j) * a + k;
                    scores.push(sigmoid(f64_of(obj_map[[k, i, j]])));
                    let t = [
                        f64_of(box_map[[4 * k, i, j]]),
                        f64_of(box_map[[4 * k + 1, i, j]]),
                        f64_of(box_map[[4 * k + 2, i, j]]),
                        f64_of(box_map[[4 * k + 3, i, j]]),
                    ];
                    boxes.push(decode_box(self.anchors[idx], t));
                }
            }
        }
        (scores, boxes)
    }

    /// Top-scoring anchors, suppressed, capped at the configured count.
    fn select_proposals(&self, scores: &[f64], boxes: &[[f64; 4]]) -> Vec<[f64; 4]> {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&x, &y| {
            scores[y].partial_cmp(&scores[x]).unwrap_or(std::cmp::Ordering::Equal).then(x.cmp(&y))
        });
        order.truncate(PRE_NMS_TOP);
        let sub_boxes: Vec<[f64; 4]> = order.iter().map(|&i| boxes[i]).collect();
        let sub_scores: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
        nms(&sub_boxes, &sub_scores, RPN_NMS_IOU)
            .into_iter()
            .take(self.cfg.proposal_count)
            .map(|k| sub_boxes[k])
            .collect()
    }

    fn pool_rows(&self, feat: &Array3<T>, proposals: &[[f64; 4]]) -> (Array2<T>, Vec<RoiCache>) {
        let c = feat.dim().0;
        let width = c * self.cfg.pool * self.cfg.pool;
        let mut rows = Array2::zeros((proposals.len(), width));
        let mut caches = Vec::with_capacity(proposals.len());
        for (r, &bbox) in proposals.iter().enumerate() {
            let (v, cache) = roi_align(feat, bbox, self.cfg.pool);
            rows.row_mut(r).assign(&v);
            caches.push(cache);
        }
        (rows, caches)
    }

    /// Shared hidden layer plus the three per-region heads.
    #[allow(clippy::type_complexity)]
    fn region_forward(
        &self,
        rows: &Array2<T>,
    ) -> (Array2<T>, Array2<T>, Array2<T>, Array2<T>, Array2<T>) {
        let pre_hidden = self.head_fc.forward(&self.params, rows);
        let hidden = relu(&pre_hidden);
        let obj = self.head_obj.forward(&self.params, &hidden);
        let boxes = self.head_box.forward(&self.params, &hidden);
        let attr = self.head_attr.forward(&self.params, &hidden);
        (pre_hidden, hidden, obj, boxes, attr)
    }

    /// Detects erroneous regions on one rendered layout.
    ///
    /// Proposals from the anchor head are refined by the per-region heads;
    /// regions below the objectness threshold are dropped and the rest are
    /// suppressed at the configured IoU. Results arrive in descending
    /// objectness.
    pub fn detect(&self, image: &WireframeImage) -> Result<Vec<Detection>> {
        self.check_image(image)?;
        let x = image_tensor::<T>(image);
        let (feat, _) = self.backbone.forward(&self.params, &x);
        let (obj_map, box_map, _) = self.rpn_forward(&feat);
        let (scores, boxes) = self.decode_rpn(&obj_map, &box_map);
        let proposals = self.select_proposals(&scores, &boxes);
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let (rows, _) = self.pool_rows(&feat, &proposals);
        let (_, _, obj, deltas, attr) = self.region_forward(&rows);
        let mut candidates: Vec<Detection> = Vec::new();
        for (r, &proposal) in proposals.iter().enumerate() {
            let objectness = sigmoid(f64_of(obj[[r, 0]]));
            if objectness < self.cfg.score_threshold {
                continue;
            }
            let t = [
                f64_of(deltas[[r, 0]]),
                f64_of(deltas[[r, 1]]),
                f64_of(deltas[[r, 2]]),
                f64_of(deltas[[r, 3]]),
            ];
            candidates.push(Detection {
                bbox: decode_box(proposal, t),
                objectness,
                attr_probs: [
                    sigmoid(f64_of(attr[[r, 0]])),
                    sigmoid(f64_of(attr[[r, 1]])),
                    sigmoid(f64_of(attr[[r, 2]])),
                    sigmoid(f64_of(attr[[r, 3]])),
                ],
            });
        }
        let boxes: Vec<[f64; 4]> = candidates.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = candidates.iter().map(|d| d.objectness).collect();
        Ok(nms(&boxes, &scores, self.cfg.nms_iou)
            .into_iter()
            .map(|k| candidates[k].clone())
            .collect())
    }

    /// Detection plus association in one step: per-element re-prediction
    /// probabilities for a rendered layout.
    pub fn annotate(&self, image: &WireframeImage, element_boxes: &[[f64; 4]]) -> Result<MaskAnnotation> {
        let detections = self.detect(image)?;
        Ok(associate(&detections, element_boxes, self.cfg.assoc_iou))
    }

    /// All five loss terms on one labelled example, optionally accumulating
    /// parameter gradients.
    ///
    /// Anchor and proposal subsampling consume `rng`; recreating the same
    /// seeded generator reproduces the same targets. `proposal_override`
    /// replaces the model's own proposals (the anchor head still trains),
    /// which pins the sampled regions in gradient tests.
    fn forward_losses(
        &self,
        image: &WireframeImage,
        gt_boxes: &[[f64; 4]],
        gt_attrs: &[[bool; 4]],
        rng: &mut ChaCha8Rng,
        proposal_override: Option<&[[f64; 4]]>,
        mut grads: Option<&mut Grads<T>>,
    ) -> Result<LossBreakdown> {
        self.check_image(image)?;
        if gt_boxes.is_empty() {
            return Err(Error::Precondition(
                "locator training needs at least one ground-truth element".to_string(),
            ));
        }
        if gt_boxes.len() != gt_attrs.len() {
            return Err(Error::Precondition(format!(
                "{} ground-truth boxes but {} attribute label rows",
                gt_boxes.len(),
                gt_attrs.len()
            )));
        }
        let x = image_tensor::<T>(image);
        let (feat, bb_cache) = self.backbone.forward(&self.params, &x);
        let (obj_map, box_map, rpn_cache) = self.rpn_forward(&feat);

        // ---- anchor-level targets and losses
        let a_per_cell = self.cfg.anchors_per_cell();
        let cell_of = |aidx: usize| {
            let cell = aidx / a_per_cell;
            (aidx % a_per_cell, cell / self.grid, cell % self.grid)
        };
        let anchor_targets = match_anchors(&self.anchors, gt_boxes, rng);
        let mut d_obj_map = Array3::<T>::zeros(obj_map.dim());
        let mut d_box_map = Array3::<T>::zeros(box_map.dim());
        let obj_samples: Vec<(usize, f64)> = anchor_targets
            .positives
            .iter()
            .map(|&(a, _)| (a, 1.0))
            .chain(anchor_targets.negatives.iter().map(|&a| (a, 0.0)))
            .collect();
        let mut rpn_obj_loss = 0.0;
        let obj_n = T::from_f64_lossy(obj_samples.len() as f64);
        for &(aidx, y) in &obj_samples {
            let (k, i, j) = cell_of(aidx);
            let (l, dz) = bce_with_logits(obj_map[[k, i, j]], T::from_f64_lossy(y));
            rpn_obj_loss += f64_of(l) / obj_samples.len() as f64;
            d_obj_map[[k, i, j]] = d_obj_map[[k, i, j]] + dz / obj_n;
        }
        let mut rpn_box_loss = 0.0;
        if !anchor_targets.positives.is_empty() {
            let box_n = T::from_f64_lossy(4.0 * anchor_targets.positives.len() as f64);
            for &(aidx, g) in &anchor_targets.positives {
                let (k, i, j) = cell_of(aidx);
                let target = encode_box(self.anchors[aidx], gt_boxes[g]);
                for c in 0..4 {
                    let d = box_map[[4 * k + c, i, j]] - T::from_f64_lossy(target[c]);
                    let (l, dd) = smooth_l1(d);
                    rpn_box_loss += f64_of(l) / (4.0 * anchor_targets.positives.len() as f64);
                    d_box_map[[4 * k + c, i, j]] = d_box_map[[4 * k + c, i, j]] + dd / box_n;
                }
            }
        }

        // ---- region-level targets and losses
        let proposals: Vec<[f64; 4]> = match proposal_override {
            Some(p) => p.to_vec(),
            None => {
                // Proposal geometry is treated as data: no gradient flows
                // through the box coordinates into the anchor head.
                let (scores, boxes) = self.decode_rpn(&obj_map, &box_map);
                let mut props = self.select_proposals(&scores, &boxes);
                props.extend_from_slice(gt_boxes);
                props
            }
        };
        if proposals.is_empty() {
            return Err(Error::Precondition("no proposals to train region heads on".to_string()));
        }
        let prop_targets = match_proposals(&proposals, gt_boxes, rng);
        let sampled: Vec<(usize, Option<usize>)> = prop_targets
            .foreground
            .iter()
            .map(|&(p, g)| (p, Some(g)))
            .chain(prop_targets.background.iter().map(|&p| (p, None)))
            .collect();
        let fg_n = prop_targets.foreground.len();

        let mut region_obj_loss = 0.0;
        let mut region_box_loss = 0.0;
        let mut region_attr_loss = 0.0;
        let (rows, caches);
        let (pre_hidden, hidden, obj, deltas, attr);
        let mut d_obj = Array2::<T>::zeros((sampled.len(), 1));
        let mut d_box = Array2::<T>::zeros((sampled.len(), 4));
        let mut d_attr = Array2::<T>::zeros((sampled.len(), 4));
        if !sampled.is_empty() {
            let sample_boxes: Vec<[f64; 4]> = sampled.iter().map(|&(p, _)| proposals[p]).collect();
            let pooled = self.pool_rows(&feat, &sample_boxes);
            rows = pooled.0;
            caches = pooled.1;
            let fwd = self.region_forward(&rows);
            pre_hidden = fwd.0;
            hidden = fwd.1;
            obj = fwd.2;
            deltas = fwd.3;
            attr = fwd.4;
            let s_n = T::from_f64_lossy(sampled.len() as f64);
            let fg_scale = T::from_f64_lossy(4.0 * fg_n as f64);
            for (r, &(p, g)) in sampled.iter().enumerate() {
                let y = if g.is_some() { 1.0 } else { 0.0 };
                let (l, dz) = bce_with_logits(obj[[r, 0]], T::from_f64_lossy(y));
                region_obj_loss += f64_of(l) / sampled.len() as f64;
                d_obj[[r, 0]] = dz / s_n;
                if let Some(g) = g {
                    let target = encode_box(proposals[p], gt_boxes[g]);
                    for c in 0..4 {
                        let d = deltas[[r, c]] - T::from_f64_lossy(target[c]);
                        let (l, dd) = smooth_l1(d);
                        region_box_loss += f64_of(l) / (4.0 * fg_n as f64);
                        d_box[[r, c]] = dd / fg_scale;
                        let label = if gt_attrs[g][c] { 1.0 } else { 0.0 };
                        let (l2, dz2) = bce_with_logits(attr[[r, c]], T::from_f64_lossy(label));
                        region_attr_loss += f64_of(l2) / (4.0 * fg_n as f64);
                        d_attr[[r, c]] = dz2 / fg_scale;
                    }
                }
            }

            if let Some(grads) = grads.as_deref_mut() {
                let mut d_hidden = self.head_obj.backward(&self.params, &hidden, &d_obj, grads);
                d_hidden =
                    d_hidden + self.head_box.backward(&self.params, &hidden, &d_box, grads);
                d_hidden =
                    d_hidden + self.head_attr.backward(&self.params, &hidden, &d_attr, grads);
                let d_hidden = relu_backward(&pre_hidden, &d_hidden);
                let d_rows = self.head_fc.backward(&self.params, &rows, &d_hidden, grads);
                let mut d_feat = Array3::<T>::zeros(feat.dim());
                for (r, cache) in caches.iter().enumerate() {
                    let g_row = d_rows.row(r).to_owned();
                    d_feat = d_feat + roi_align_backward(cache, &g_row, feat.dim());
                }
                let d_h_obj = self.rpn_obj.backward(&self.params, &rpn_cache.obj, &d_obj_map, grads);
                let d_h_box =
                    self.rpn_box.backward(&self.params, &rpn_cache.boxes, &d_box_map, grads);
                let mut d_rpn_hidden = d_h_obj + d_h_box;
                relu3_backward(&mut d_rpn_hidden, &rpn_cache.pre);
                d_feat =
                    d_feat + self.rpn_conv.backward(&self.params, &rpn_cache.conv, &d_rpn_hidden, grads);
                self.backbone.backward(&self.params, &bb_cache, &d_feat, grads);
            }
        } else if let Some(grads) = grads.as_deref_mut() {
            let d_h_obj = self.rpn_obj.backward(&self.params, &rpn_cache.obj, &d_obj_map, grads);
            let d_h_box = self.rpn_box.backward(&self.params, &rpn_cache.boxes, &d_box_map, grads);
            let mut d_rpn_hidden = d_h_obj + d_h_box;
            relu3_backward(&mut d_rpn_hidden, &rpn_cache.pre);
            let d_feat = self.rpn_conv.backward(&self.params, &rpn_cache.conv, &d_rpn_hidden, grads);
            self.backbone.backward(&self.params, &bb_cache, &d_feat, grads);
        }

        Ok(LossBreakdown {
            rpn_objectness: rpn_obj_loss,
            rpn_box: rpn_box_loss,
            region_objectness: region_obj_loss,
            region_box: region_box_loss,
            region_attributes: region_attr_loss,
        })
    }
}

impl MaskScorer for PixelLocator<f32> {
    fn score(&self, image: &WireframeImage, boxes: &[[f64; 4]]) -> Result<Vec<[f64; 4]>> {
        let detections = self.detect(image)?;
        Ok(associate_probs(&detections, boxes, self.cfg.assoc_iou))
    }
}

// ============================================================================
// Training and evaluation
// ============================================================================

/// Loss curve summary from one locator training run.
#[derive(Debug, Clone)]
pub struct LocatorTrainReport {
    pub steps: usize,
    /// Mean total loss per step, measured before each update.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    /// Mean over the final stretch (up to 20 steps).
    pub final_loss: f64,
}

/// Renders one record at the locator's input resolution.
fn record_image(record: &LocatorRecord, cfg: &LocatorConfig) -> Result<WireframeImage> {
    render_wireframe(
        &record.layout,
        cfg.num_categories,
        &RenderConfig { width: cfg.image_size, height: cfg.image_size },
    )
}

/// A record trains only if its annotation covers its elements and every
/// element has positive area (log-scale box targets need a nonzero size).
fn record_usable(record: &LocatorRecord) -> bool {
    !record.layout.elements.is_empty()
        && record.annotation.flags.len() == record.layout.len()
        && record.layout.elements.iter().all(|e| e.w > 0.0 && e.h > 0.0)
}

/// Trains a pixel locator from scratch on annotated snapshots.
///
/// Batches are drawn uniformly with replacement. The learning rate is
/// constant. `on_step` observes `(step_index, mean_loss)` after each
/// update. Records with empty layouts, mismatched annotations, or
/// zero-area elements are skipped; an empty usable set is an error.
pub fn train_locator(
    records: &[LocatorRecord],
    cfg: &LocatorConfig,
    steps: usize,
    seed: u64,
    par: Parallelism,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(PixelLocator<f32>, LocatorTrainReport)> {
    cfg.validate()?;
    if steps == 0 {
        return Err(Error::Precondition("locator training needs at least one step".to_string()));
    }
    let usable: Vec<&LocatorRecord> = records.iter().filter(|r| record_usable(r)).collect();
    if usable.is_empty() {
        return Err(Error::data("no usable locator training records"));
    }
    let images: Vec<WireframeImage> =
        usable.iter().map(|r| record_image(r, cfg)).collect::<Result<_>>()?;
    let mut locator = PixelLocator::<f32>::new(cfg.clone(), derive_seed(seed, "locator-init"))?;
    let mut opt = AdamW::new(&locator.params, cfg.beta1, cfg.beta2, 0.0);
    let mut rng = rng_from_seed(derive_seed(seed, "locator-batches"));
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        // Indices and per-item seeds are drawn sequentially so the result
        // does not depend on the execution mode.
        let items: Vec<(usize, u64)> = (0..cfg.batch_size)
            .map(|_| {
                use rand::Rng;
                let idx = rng.gen_range(0..usable.len());
                (idx, rng.gen())
            })
            .collect();
        let loc = &locator;
        let results: Vec<Result<(f64, Grads<f32>)>> = map_items(par, &items, |&(idx, s)| {
            let record = usable[idx];
            let gt_boxes: Vec<[f64; 4]> =
                record.layout.elements.iter().map(|e| e.bbox()).collect();
            let mut item_rng = rng_from_seed(s);
            let mut grads = Grads::new(&loc.params);
            let breakdown = loc.forward_losses(
                &images[idx],
                &gt_boxes,
                &record.annotation.flags,
                &mut item_rng,
                None,
                Some(&mut grads),
            )?;
            Ok((breakdown.total(), grads))
        });
        let mut total = 0.0;
        let mut grads = Grads::new(&locator.params);
        for result in results {
            let (loss, g) = result?;
            total += loss;
            grads.merge(g);
        }
        grads.scale(1.0 / items.len() as f32);
        opt.step(&mut locator.params, &grads, cfg.learning_rate);
        let mean = total / items.len() as f64;
        losses.push(mean);
        on_step(step, mean);
    }
    let tail = losses.len().min(20);
    let report = LocatorTrainReport {
        steps,
        initial_loss: losses[0],
        final_loss: losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64,
        losses,
    };
    Ok((locator, report))
}

/// Micro-averaged precision/recall/F1 over element-attribute flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocatorEval {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub records: usize,
}

/// Precision/recall/F1 from micro counts. Empty denominators count as
/// perfect (nothing predicted / nothing to find); an empty numerator on
/// both sides yields F1 zero only when precision and recall are both zero.
pub(crate) fn scores_from_counts(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Scores any annotation source against record labels, micro-averaged over
/// every element-attribute pair. Shared by the pixel locator and the
/// object-space tagger so their metrics are directly comparable.
pub fn evaluate_annotations(
    records: &[LocatorRecord],
    par: Parallelism,
    annotate: impl Fn(&LocatorRecord) -> Result<MaskAnnotation> + Sync + Send,
) -> Result<LocatorEval> {
    if records.is_empty() {
        return Err(Error::data("no records to evaluate on"));
    }
    let counts: Vec<Result<(usize, usize, usize)>> = map_items(par, records, |record| {
        let predicted = annotate(record)?;
        if predicted.flags.len() != record.annotation.flags.len() {
            return Err(Error::Invariant(format!(
                "annotation length {} differs from label length {}",
                predicted.flags.len(),
                record.annotation.flags.len()
            )));
        }
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (pred, label) in predicted.flags.iter().zip(&record.annotation.flags) {
            for k in 0..4 {
                match (pred[k], label[k]) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
        }
        Ok((tp, fp, fn_))
    });
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for c in counts {
        let (t, f, n) = c?;
        tp += t;
        fp += f;
        fn_ += n;
    }
    let (precision, recall, f1) = scores_from_counts(tp, fp, fn_);
    Ok(LocatorEval {
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        records: records.len(),
    })
}

/// Compares locator annotations against record labels, micro-averaged over
/// every element-attribute pair.
pub fn evaluate_locator(
    locator: &PixelLocator<f32>,
    records: &[LocatorRecord],
    par: Parallelism,
) -> Result<LocatorEval> {
    let cfg = locator.config();
    evaluate_annotations(records, par, |record| {
        let image = record_image(record, cfg)?;
        let boxes: Vec<[f64; 4]> = record.layout.elements.iter().map(|e| e.bbox()).collect();
        locator.annotate(&image, &boxes)
    })
}

// ============================================================================
// Checkpoints
// ============================================================================

/// Side information stored with a locator checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocatorExtras {
    pub training_steps: usize,
}

/// Saves the locator with the vocabulary hash of the layouts it was
/// trained on, so downstream loads can verify schema compatibility.
pub fn save_locator(
    locator: &PixelLocator<f32>,
    extras: &LocatorExtras,
    vocab_hash: &str,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    let ckpt = Checkpoint::new(
        LOCATOR_KIND,
        serde_json::to_value(locator.config())?,
        vocab_hash,
        serde_json::to_value(extras)?,
        locator.params.clone(),
    );
    ckpt.save(path)
}

/// Loads a locator checkpoint, optionally insisting on a vocabulary hash.
pub fn load_locator(
    path: impl AsRef<std::path::Path>,
    expected_vocab_hash: Option<&str>,
) -> Result<(PixelLocator<f32>, LocatorExtras)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != LOCATOR_KIND {
        return Err(Error::data(format!(
            "checkpoint kind {:?} where {LOCATOR_KIND:?} is required",
            ckpt.kind
        )));
    }
    if let Some(expected) = expected_vocab_hash {
        if ckpt.vocab_hash != expected {
            return Err(Error::Schema(format!(
                "locator was trained against vocabulary {} but the current vocabulary is {expected}",
                ckpt.vocab_hash
            )));
        }
    }
    let cfg: LocatorConfig = serde_json::from_value(ckpt.config)?;
    let extras: LocatorExtras = serde_json::from_value(ckpt.extras)?;
    let mut locator = PixelLocator::<f32>::new(cfg, 0)?;
    locator.params.load_values_from(&ckpt.params)?;
    Ok((locator, extras))
}
