//! Batched forward pass and analytic gradients of the cascade objective.
//!
//! A batch is a list of [`ImageProblem`]s. Each problem carries, for every
//! stage, the stacked proposal features of all of its objects' bags followed
//! by that stage's negatives. Normalizers (object count, negative count, the
//! background weight) are batch-global, so the objective is evaluated in two
//! passes: forward on every image, then per-image gradients given the
//! global constants, reduced in image order.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis};

use super::losses::{bce_term, focal_term, neg_term};
use super::{LossConfig, LossReport};
use crate::error::{Error, Result};
use crate::mil_model::{
    head_scores, sigmoid, trunk_forward, ClsActivation, ModelParams, ScoreBundle, TrunkCache,
};
use crate::parallel::Parallelism;

/// Inputs of one stage of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct StageInput {
    /// Bag rows (object by object) followed by `num_neg` negative rows.
    pub features: Array2<f64>,
    /// Row range of each object's bag, in object order.
    pub bag_rows: Vec<Range<usize>>,
    pub num_neg: usize,
}

impl StageInput {
    pub fn neg_rows(&self) -> Range<usize> {
        let n = self.features.nrows();
        n - self.num_neg..n
    }
}

/// One image: object categories plus one [`StageInput`] per stage
/// (`stages[0]` is the coarse stage).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageProblem {
    pub categories: Vec<usize>,
    pub stages: Vec<StageInput>,
}

#[derive(Debug, Clone)]
pub struct StageForward {
    pub trunk: TrunkCache,
    pub bundles: Vec<ScoreBundle>,
    pub neg_scores: Array2<f64>,
}

/// Trunk on all rows once, then each bag through the stage head.
pub fn forward_stage(
    params: &ModelParams,
    stage: usize,
    input: &StageInput,
) -> Result<StageForward> {
    if stage >= params.heads.len() {
        return Err(Error::Shape(format!("stage {stage} has no head")));
    }
    if input.features.ncols() != params.d_in() {
        return Err(Error::Shape(format!(
            "feature dim {} != model input {}",
            input.features.ncols(),
            params.d_in()
        )));
    }
    if input.features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("stage {stage} features")));
    }
    let head = &params.heads[stage];
    let trunk = trunk_forward(params, input.features.view());
    let act = ClsActivation::for_stage(stage);
    let bundles = input
        .bag_rows
        .iter()
        .map(|r| {
            if r.is_empty() {
                return Err(Error::Shape("bag has no proposals".into()));
            }
            Ok(head_scores(trunk.h2.slice(s![r.clone(), ..]), head, act))
        })
        .collect::<Result<Vec<_>>>()?;
    let neg_scores = head
        .cls
        .apply(trunk.h2.slice(s![input.neg_rows(), ..]))
        .mapv(sigmoid);
    Ok(StageForward {
        trunk,
        bundles,
        neg_scores,
    })
}

/// Forward of every stage, with previous-stage bag scores attached.
pub fn forward_image(params: &ModelParams, problem: &ImageProblem) -> Result<Vec<StageForward>> {
    let mut out: Vec<StageForward> = Vec::with_capacity(problem.stages.len());
    for (t, input) in problem.stages.iter().enumerate() {
        if input.bag_rows.len() != problem.categories.len() {
            return Err(Error::Shape(format!(
                "stage {t} has {} bags for {} objects",
                input.bag_rows.len(),
                problem.categories.len()
            )));
        }
        let mut f = forward_stage(params, t, input)?;
        if let Some(prev) = out.last() {
            for (b, p) in f.bundles.iter_mut().zip(&prev.bundles) {
                b.prev_bag_score = Some(p.bag_score.clone());
            }
        }
        out.push(f);
    }
    Ok(out)
}

/// Previous-stage true-class bag scores, `[t - 1][object]`, for one image.
pub type PrevWeights = Vec<Vec<f64>>;

pub fn prev_weights(problem: &ImageProblem, forwards: &[StageForward]) -> PrevWeights {
    forwards
        .iter()
        .take(forwards.len().saturating_sub(1))
        .map(|f| {
            f.bundles
                .iter()
                .zip(&problem.categories)
                .map(|(b, &k)| b.bag_score[k])
                .collect()
        })
        .collect()
}

/// Batch-global normalizers.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchConstants {
    pub num_objects: usize,
    /// `beta[t - 1]`: mean previous-stage true-class bag score.
    pub beta: Vec<f64>,
    /// `num_neg[t - 1]`: negatives in the batch for refinement stage `t`.
    pub num_neg: Vec<usize>,
}

impl BatchConstants {
    pub fn compute(problems: &[ImageProblem], weights: &[PrevWeights]) -> Self {
        let num_objects: usize = problems.iter().map(|p| p.categories.len()).sum();
        let t_max = problems
            .iter()
            .map(|p| p.stages.len())
            .max()
            .unwrap_or(1)
            .saturating_sub(1);
        let mut beta = vec![0.0; t_max];
        let mut num_neg = vec![0usize; t_max];
        for (p, w) in problems.iter().zip(weights) {
            for t in 1..p.stages.len() {
                beta[t - 1] += w[t - 1].iter().sum::<f64>();
                num_neg[t - 1] += p.stages[t].num_neg;
            }
        }
        if num_objects > 0 {
            for b in &mut beta {
                *b /= num_objects as f64;
            }
        }
        Self {
            num_objects,
            beta,
            num_neg,
        }
    }
}

/// Unnormalized per-image loss sums.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageTerms {
    pub cbp: f64,
    pub mil: Vec<f64>,
    pub neg: Vec<f64>,
}

impl ImageTerms {
    fn add(&mut self, other: &ImageTerms) {
        self.cbp += other.cbp;
        for (dst, src) in [(&mut self.mil, &other.mil), (&mut self.neg, &other.neg)] {
            if dst.len() < src.len() {
                dst.resize(src.len(), 0.0);
            }
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

/// Gradients of one image's share of the batch objective, accumulated
/// into `grads`. Returns the unnormalized loss sums.
pub fn image_backward(
    params: &ModelParams,
    problem: &ImageProblem,
    forwards: &[StageForward],
    weights: &PrevWeights,
    consts: &BatchConstants,
    cfg: &LossConfig,
    grads: &mut ModelParams,
) -> ImageTerms {
    let m = consts.num_objects.max(1) as f64;
    let k = params.num_classes();
    let mut terms = ImageTerms {
        cbp: 0.0,
        mil: vec![0.0; problem.stages.len().saturating_sub(1)],
        neg: vec![0.0; problem.stages.len().saturating_sub(1)],
    };
    for (t, (input, fwd)) in problem.stages.iter().zip(forwards).enumerate() {
        let rows = input.features.nrows();
        let mut d_cls = Array2::<f64>::zeros((rows, k));
        let mut d_ins = Array2::<f64>::zeros((rows, k));
        let act = ClsActivation::for_stage(t);
        for (j, (range, b)) in input.bag_rows.iter().zip(&fwd.bundles).enumerate() {
            let cat = problem.categories[j];
            let mut g = vec![0.0; k];
            for (kk, gk) in g.iter_mut().enumerate() {
                let c = if kk == cat { 1.0 } else { 0.0 };
                let s = b.bag_score[kk];
                if t == 0 {
                    let (l, d) = bce_term(s, c);
                    terms.cbp += l;
                    *gk = cfg.alpha_mil1 / m * d;
                } else {
                    let w = weights[t - 1][j];
                    let (l, d) = focal_term(s, c, cfg.gamma);
                    terms.mil[t - 1] += w * l;
                    *gk = cfg.alpha_mil2 / m * w * d;
                }
            }
            let mut dc = d_cls.slice_mut(s![range.clone(), ..]);
            let mut di = d_ins.slice_mut(s![range.clone(), ..]);
            for u in 0..range.len() {
                for kk in 0..k {
                    let (sc, si) = (b.s_cls[[u, kk]], b.s_ins[[u, kk]]);
                    di[[u, kk]] = g[kk] * si * (sc - b.bag_score[kk]);
                }
                match act {
                    ClsActivation::Softmax => {
                        let gs: Vec<f64> = (0..k).map(|kk| g[kk] * b.s_ins[[u, kk]]).collect();
                        let dot: f64 = (0..k).map(|kk| b.s_cls[[u, kk]] * gs[kk]).sum();
                        for kk in 0..k {
                            dc[[u, kk]] = b.s_cls[[u, kk]] * (gs[kk] - dot);
                        }
                    }
                    ClsActivation::Sigmoid => {
                        for kk in 0..k {
                            let sc = b.s_cls[[u, kk]];
                            dc[[u, kk]] = g[kk] * b.s_ins[[u, kk]] * sc * (1.0 - sc);
                        }
                    }
                }
            }
        }
        if t > 0 && input.num_neg > 0 {
            let scale = cfg.alpha_neg * consts.beta[t - 1] / consts.num_neg[t - 1].max(1) as f64;
            let mut dn = d_cls.slice_mut(s![input.neg_rows(), ..]);
            for ((u, kk), &sv) in fwd.neg_scores.indexed_iter() {
                let (l, d) = neg_term(sv, cfg.gamma);
                terms.neg[t - 1] += l;
                dn[[u, kk]] = scale * d * sv * (1.0 - sv);
            }
        }

        let head = &params.heads[t];
        let ghead = &mut grads.heads[t];
        let h2 = &fwd.trunk.h2;
        general_mat_mul(1.0, &h2.t(), &d_cls, 1.0, &mut ghead.cls.weight);
        ghead.cls.bias += &d_cls.sum_axis(Axis(0));
        general_mat_mul(1.0, &h2.t(), &d_ins, 1.0, &mut ghead.ins.weight);
        ghead.ins.bias += &d_ins.sum_axis(Axis(0));

        let mut dh2 = d_cls.dot(&head.cls.weight.t());
        general_mat_mul(1.0, &d_ins, &head.ins.weight.t(), 1.0, &mut dh2);
        trunk_backward(params, &input.features, &fwd.trunk, dh2, grads);
    }
    terms
}

fn trunk_backward(
    params: &ModelParams,
    x: &Array2<f64>,
    cache: &TrunkCache,
    mut dh2: Array2<f64>,
    grads: &mut ModelParams,
) {
    dh2.zip_mut_with(&cache.h2, |d, &h| *d *= 1.0 - h * h);
    let dpre2 = dh2;
    general_mat_mul(1.0, &cache.h1.t(), &dpre2, 1.0, &mut grads.trunk[1].weight);
    grads.trunk[1].bias += &dpre2.sum_axis(Axis(0));
    let mut dh1 = dpre2.dot(&params.trunk[1].weight.t());
    dh1.zip_mut_with(&cache.h1, |d, &h| *d *= 1.0 - h * h);
    general_mat_mul(1.0, &x.t(), &dh1, 1.0, &mut grads.trunk[0].weight);
    grads.trunk[0].bias += &dh1.sum_axis(Axis(0));
}

/// Turns summed terms into the normalized loss report.
pub fn make_report(
    terms: &ImageTerms,
    consts: &BatchConstants,
    cfg: &LossConfig,
    weights: &[PrevWeights],
) -> LossReport {
    let m = consts.num_objects.max(1) as f64;
    let l_cbp = cfg.alpha_mil1 * terms.cbp / m;
    let t_max = consts.beta.len();
    let mut l_mil2 = vec![0.0; t_max];
    let mut l_neg = vec![0.0; t_max];
    let mut l_pbr = vec![0.0; t_max];
    for t in 0..t_max {
        l_mil2[t] = terms.mil.get(t).copied().unwrap_or(0.0) / m;
        if consts.num_neg[t] > 0 {
            l_neg[t] = consts.beta[t] * terms.neg.get(t).copied().unwrap_or(0.0)
                / consts.num_neg[t] as f64;
        }
        l_pbr[t] = cfg.alpha_mil2 * l_mil2[t] + cfg.alpha_neg * l_neg[t];
    }
    let object_weights = (0..t_max)
        .map(|t| weights.iter().flat_map(|w| w[t].iter().copied()).collect())
        .collect();
    LossReport {
        l_cbp,
        l_total: l_cbp + l_pbr.iter().sum::<f64>(),
        l_mil2,
        l_neg,
        l_pbr,
        beta: consts.beta.clone(),
        object_weights,
    }
}

/// Loss and gradients of a whole batch. With `frozen`, the previous-stage
/// weights are taken from it instead of the current forward pass; this
/// makes the objective match its stop-gradient reading for finite
/// differences.
pub fn batch_objective(
    params: &ModelParams,
    problems: &[ImageProblem],
    cfg: &LossConfig,
    frozen: Option<&[PrevWeights]>,
    par: Parallelism,
) -> Result<(LossReport, ModelParams)> {
    let forwards = par.try_map(problems, |p| forward_image(params, p))?;
    let weights: Vec<PrevWeights> = match frozen {
        Some(w) => w.to_vec(),
        None => problems
            .iter()
            .zip(&forwards)
            .map(|(p, f)| prev_weights(p, f))
            .collect(),
    };
    Ok(backward_batch(
        params, problems, &forwards, &weights, cfg, par,
    ))
}

/// Second pass of [`batch_objective`] on precomputed forwards.
pub fn backward_batch(
    params: &ModelParams,
    problems: &[ImageProblem],
    forwards: &[Vec<StageForward>],
    weights: &[PrevWeights],
    cfg: &LossConfig,
    par: Parallelism,
) -> (LossReport, ModelParams) {
    let consts = BatchConstants::compute(problems, weights);
    let parts = par.map_range(problems.len(), |i| {
        let mut g = params.zeros_like();
        let terms = image_backward(
            params,
            &problems[i],
            &forwards[i],
            &weights[i],
            &consts,
            cfg,
            &mut g,
        );
        (terms, g)
    });
    let mut grads = params.zeros_like();
    let mut terms = ImageTerms::default();
    for (t, g) in &parts {
        terms.add(t);
        grads.add_scaled(1.0, g);
    }
    (make_report(&terms, &consts, cfg, weights), grads)
}
