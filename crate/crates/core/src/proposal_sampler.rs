//! Proposal bags: fixed point-centered bags for the coarse stage, jittered
//! bags around the previous estimate for refinement, and background
//! negatives far from every positive.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_to_image, iou, BBox, ImageShape, PointAnno};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Base scales, multiplied by `min(W, H) / 100`.
    pub cbp_scales: Vec<f64>,
    /// Aspect ratios `v`; proposals are `v * s` wide and `s / v` tall.
    pub cbp_ratios: Vec<f64>,
    /// Width factors applied to the previous box.
    pub pbr_ws: Vec<f64>,
    /// Height factors applied to the previous box.
    pub pbr_hs: Vec<f64>,
    /// Center offsets, in units of the jittered box size.
    pub pbr_offsets: Vec<(f64, f64)>,
    pub neg_pool: usize,
    pub neg_iou_max: f64,
    /// Smallest side length of a random negative, in pixels.
    pub neg_min_side: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            cbp_scales: vec![4.0, 8.0, 16.0, 32.0, 64.0, 128.0],
            cbp_ratios: vec![1.0 / 3.0, 0.5, 2.0 / 3.0, 1.0, 1.5, 2.0, 3.0],
            pbr_ws: vec![0.7, 0.8, 1.0, 1.2, 1.3],
            pbr_hs: vec![0.7, 0.8, 1.0, 1.2, 1.3],
            pbr_offsets: vec![
                (0.0, 0.0),
                (1.0, 0.0),
                (0.0, 1.0),
                (-1.0, 0.0),
                (-1.0, -1.0),
            ],
            neg_pool: 500,
            neg_iou_max: 0.3,
            neg_min_side: 4.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: &[f64]| !v.is_empty() && v.iter().all(|x| *x > 0.0 && x.is_finite());
        if !(positive(&self.cbp_scales)
            && positive(&self.cbp_ratios)
            && positive(&self.pbr_ws)
            && positive(&self.pbr_hs))
        {
            return Err(Error::Config(
                "sampler scales and ratios must be positive".into(),
            ));
        }
        if self.pbr_offsets.is_empty() {
            return Err(Error::Config(
                "at least one refinement offset is required".into(),
            ));
        }
        if !(self.neg_iou_max > 0.0 && self.neg_iou_max < 1.0) {
            return Err(Error::Config(format!(
                "neg_iou_max {} not in (0, 1)",
                self.neg_iou_max
            )));
        }
        if self.neg_min_side.is_nan() || self.neg_min_side <= 0.0 {
            return Err(Error::Config("neg_min_side must be positive".into()));
        }
        Ok(())
    }

    /// `min(W, H) / 100`.
    pub fn delta(shape: ImageShape) -> f64 {
        shape.width.min(shape.height) / 100.0
    }

    /// Absolute coarse-stage scales for an image.
    pub fn scales_for(&self, shape: ImageShape) -> Vec<f64> {
        let delta = Self::delta(shape);
        self.cbp_scales.iter().map(|s| s * delta).collect()
    }

    pub fn cbp_bag_size(&self) -> usize {
        self.cbp_scales.len() * self.cbp_ratios.len()
    }

    pub fn pbr_bag_size(&self) -> usize {
        self.pbr_ws.len() * self.pbr_hs.len() * self.pbr_offsets.len()
    }
}

/// Which stage a bag was generated for. `Pbr(t)` counts from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Cbp,
    Pbr(usize),
}

impl Stage {
    pub fn index(self) -> usize {
        match self {
            Stage::Cbp => 0,
            Stage::Pbr(t) => t,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Stage::Cbp
        } else {
            Stage::Pbr(i)
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Cbp => write!(f, "cbp"),
            Stage::Pbr(t) => write!(f, "pbr{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalBag {
    pub object_id: u64,
    pub stage: Stage,
    pub proposals: Vec<BBox>,
}

impl ProposalBag {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSet {
    pub image_id: u64,
    pub negatives: Vec<BBox>,
}

/// Coarse bag: every scale x ratio, centered on the point and clipped inside
/// the image. Order is scale-major; duplicates after clipping are kept.
pub fn cbp_bag(
    object_id: u64,
    point: &PointAnno,
    shape: ImageShape,
    cfg: &SamplerConfig,
) -> Result<ProposalBag> {
    let mut proposals = Vec::with_capacity(cfg.cbp_bag_size());
    for s in cfg.scales_for(shape) {
        for &v in &cfg.cbp_ratios {
            match clip_to_image(point, s, v, shape) {
                Ok(b) => proposals.push(b),
                Err(Error::DegenerateProposal { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }
    if proposals.is_empty() {
        return Err(Error::EmptyBag { object_id });
    }
    Ok(ProposalBag {
        object_id,
        stage: Stage::Cbp,
        proposals,
    })
}

/// Jittered proposal around `b_star` before any image clipping.
pub fn pbr_jitter(b_star: &BBox, fw: f64, fh: f64, offset: (f64, f64)) -> BBox {
    let w = fw * b_star.w;
    let h = fh * b_star.h;
    BBox {
        cx: b_star.cx + w * offset.0,
        cy: b_star.cy + h * offset.1,
        w,
        h,
    }
}

/// Refinement bag: width factor x height factor x center offset around the
/// previous estimate, each proposal intersected with the image. Proposals
/// that leave the image entirely are dropped.
pub fn pbr_bag(
    object_id: u64,
    b_star: &BBox,
    shape: ImageShape,
    cfg: &SamplerConfig,
    iteration: usize,
) -> Result<ProposalBag> {
    let mut proposals = Vec::with_capacity(cfg.pbr_bag_size());
    for &fw in &cfg.pbr_ws {
        for &fh in &cfg.pbr_hs {
            for &off in &cfg.pbr_offsets {
                if let Some(b) = pbr_jitter(b_star, fw, fh, off).intersect_image(shape) {
                    proposals.push(b);
                }
            }
        }
    }
    if proposals.is_empty() {
        return Err(Error::EmptyBag { object_id });
    }
    Ok(ProposalBag {
        object_id,
        stage: Stage::Pbr(iteration.max(1)),
        proposals,
    })
}

/// Draws `neg_pool` random boxes (uniform centers, log-uniform sides in
/// `[neg_min_side, min(W, H)]`, clipped to the image) and keeps those whose
/// IoU with every positive proposal is below `neg_iou_max`.
pub fn sample_negatives(
    image_id: u64,
    bags: &[ProposalBag],
    shape: ImageShape,
    cfg: &SamplerConfig,
    rng_seed: u64,
) -> Result<NegativeSet> {
    if bags.is_empty() {
        return Err(Error::NoPositiveBags { image_id });
    }
    let mut rng = seed::rng(&[rng_seed, image_id]);
    let lo = cfg.neg_min_side.ln();
    let hi = shape.width.min(shape.height).max(cfg.neg_min_side).ln();
    let positives: Vec<&BBox> = bags.iter().flat_map(|b| &b.proposals).collect();
    let mut negatives = Vec::new();
    for _ in 0..cfg.neg_pool {
        let cx = rng.random_range(0.0..shape.width);
        let cy = rng.random_range(0.0..shape.height);
        let w = rng.random_range(lo..=hi).exp();
        let h = rng.random_range(lo..=hi).exp();
        let Some(b) = (BBox { cx, cy, w, h }).intersect_image(shape) else {
            continue;
        };
        if positives.iter().all(|p| iou(&b, p) < cfg.neg_iou_max) {
            negatives.push(b);
        }
    }
    Ok(NegativeSet {
        image_id,
        negatives,
    })
}
