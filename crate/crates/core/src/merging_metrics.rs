//! Top-k pseudo-box merging and pseudo-box quality metrics.

use std::collections::{BTreeMap, HashMap};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::annotations::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::proposal_sampler::ProposalBag;

pub const HIST_BINS: usize = 50;
pub const RECALL_THRESHOLDS: [f64; 3] = [0.5, 0.75, 0.9];

/// Which score matrix ranks and weights proposals during merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// Hadamard product of both streams.
    #[default]
    Bag,
    /// Classification stream only.
    Cls,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub k: usize,
    pub score_source: ScoreSource,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            k: 4,
            score_source: ScoreSource::Bag,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("merge k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Indices of the `k` largest scores, ties going to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k.min(scores.len()));
    idx
}

/// Score-weighted average (center form) of the top-k proposals of column
/// `category` of `scores`. Falls back to uniform weights when every selected
/// score is zero.
pub fn merge_topk(
    bag: &ProposalBag,
    scores: ArrayView2<'_, f64>,
    category: usize,
    k: usize,
) -> Result<BBox> {
    if bag.is_empty() {
        return Err(Error::EmptyBag {
            object_id: bag.object_id,
        });
    }
    if scores.nrows() != bag.len() || category >= scores.ncols() {
        return Err(Error::Shape(format!(
            "scores {}x{} do not match bag of {} at category {category}",
            scores.nrows(),
            scores.ncols(),
            bag.len()
        )));
    }
    let col: Vec<f64> = scores.column(category).to_vec();
    let sel = top_k_indices(&col, k.max(1));
    let total: f64 = sel.iter().map(|&i| col[i]).sum();
    let weight = |i: usize| {
        if total > 0.0 {
            col[i] / total
        } else {
            1.0 / sel.len() as f64
        }
    };
    let mut out = [0.0; 4];
    for &i in &sel {
        let b = &bag.proposals[i];
        let wgt = weight(i);
        for (o, v) in out.iter_mut().zip([b.cx, b.cy, b.w, b.h]) {
            *o += wgt * v;
        }
    }
    Ok(BBox {
        cx: out[0],
        cy: out[1],
        w: out[2],
        h: out[3],
    })
}

fn pseudo_for<'a>(pseudo: &'a HashMap<u64, BBox>, ds: &Dataset) -> Result<Vec<(&'a BBox, BBox)>> {
    let missing: Vec<u64> = ds
        .objects
        .iter()
        .filter(|o| !pseudo.contains_key(&o.object_id))
        .map(|o| o.object_id)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingObjects(missing));
    }
    Ok(ds
        .objects
        .iter()
        .map(|o| (&pseudo[&o.object_id], o.gt_box))
        .collect())
}

/// Per-object IoU of pseudo box against ground truth, in dataset order.
pub fn pseudo_ious(pseudo: &HashMap<u64, BBox>, ds: &Dataset) -> Result<Vec<f64>> {
    Ok(pseudo_for(pseudo, ds)?
        .into_iter()
        .map(|(p, g)| iou(p, &g))
        .collect())
}

pub fn miou_pred(pseudo: &HashMap<u64, BBox>, ds: &Dataset) -> Result<f64> {
    let ious = pseudo_ious(pseudo, ds)?;
    Ok(mean(&ious))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// 50 bins `[i/50, (i+1)/50)` over `[0, 1]`, the last one closed.
pub fn histogram(values: &[f64]) -> [usize; HIST_BINS] {
    let mut h = [0usize; HIST_BINS];
    for &v in values {
        let i = ((v * HIST_BINS as f64).floor().max(0.0) as usize).min(HIST_BINS - 1);
        h[i] += 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalQuality {
    /// Mean proposal IoU per bag, in input order.
    pub per_object: Vec<(u64, f64)>,
    pub mean: f64,
    pub histogram: Vec<usize>,
}

/// Mean IoU between each bag's proposals and its object's ground truth.
pub fn miou_prop(bags: &[ProposalBag], ds: &Dataset) -> Result<ProposalQuality> {
    let gt = ds.gt_boxes();
    let mut per_object = Vec::with_capacity(bags.len());
    for bag in bags {
        if bag.is_empty() {
            return Err(Error::EmptyBag {
                object_id: bag.object_id,
            });
        }
        let g = gt
            .get(&bag.object_id)
            .ok_or_else(|| Error::MissingObjects(vec![bag.object_id]))?;
        let m = bag.proposals.iter().map(|p| iou(p, g)).sum::<f64>() / bag.len() as f64;
        per_object.push((bag.object_id, m));
    }
    let vals: Vec<f64> = per_object.iter().map(|(_, v)| *v).collect();
    Ok(ProposalQuality {
        mean: mean(&vals),
        histogram: histogram(&vals).to_vec(),
        per_object,
    })
}

/// Bag size -> number of bags of that size.
pub fn balance_histogram(bags: &[ProposalBag]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for b in bags {
        *h.entry(b.len()).or_insert(0) += 1;
    }
    h
}

/// Fraction of objects whose pseudo box reaches each IoU threshold.
pub fn recall_at(
    pseudo: &HashMap<u64, BBox>,
    ds: &Dataset,
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let ious = pseudo_ious(pseudo, ds)?;
    let n = ious.len().max(1) as f64;
    Ok(thresholds
        .iter()
        .map(|&t| (t, ious.iter().filter(|&&v| v >= t).count() as f64 / n))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_objects: usize,
    pub miou_pred: f64,
    pub recall: Vec<(f64, f64)>,
    pub iou_histogram: Vec<usize>,
}

impl MetricsReport {
    pub fn compute(pseudo: &HashMap<u64, BBox>, ds: &Dataset) -> Result<Self> {
        let ious = pseudo_ious(pseudo, ds)?;
        Ok(Self {
            num_objects: ious.len(),
            miou_pred: mean(&ious),
            recall: recall_at(pseudo, ds, &RECALL_THRESHOLDS)?,
            iou_histogram: histogram(&ious).to_vec(),
        })
    }

    pub fn recall(&self, threshold: f64) -> Option<f64> {
        self.recall
            .iter()
            .find(|(t, _)| *t == threshold)
            .map(|(_, r)| *r)
    }
}

/// CSV with one row per histogram bin: `bin_lo,bin_hi,count`.
pub fn histogram_csv(hist: &[usize]) -> String {
    let n = hist.len() as f64;
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in hist.iter().enumerate() {
        s.push_str(&format!(
            "{:.2},{:.2},{c}\n",
            i as f64 / n,
            (i + 1) as f64 / n
        ));
    }
    s
}
