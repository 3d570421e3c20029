//! Cascade training and inference.
//!
//! Each time an image is visited, its cascade is rebuilt from the current
//! parameters: the coarse bags are scored, merged into pseudo boxes, and
//! every refinement iteration samples its bag around the previous
//! iteration's pseudo boxes. Merged boxes are treated as constants for the
//! gradient.

use std::collections::HashMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::backward::{
    backward_batch, forward_image, forward_stage, prev_weights, ImageProblem, StageForward,
    StageInput,
};
use super::{LossConfig, LossReport};
use crate::annotations::{Dataset, ObjectRecord};
use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageShape};
use crate::merging_metrics::{merge_topk, miou_pred, MergeConfig, ScoreSource};
use crate::mil_model::{ModelParams, ScoreBundle, DEFAULT_HIDDEN};
use crate::parallel::Parallelism;
use crate::proposal_sampler::{cbp_bag, pbr_bag, sample_negatives, ProposalBag, SamplerConfig};
use crate::seed;
use crate::synthetic_scenes::{feature_dim, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub merge: MergeConfig,
    pub hidden: usize,
    /// Images per SGD step.
    pub batch_size: usize,
    /// RoI pooling grid size used by the featurizer.
    pub pool: usize,
    /// Keep at most this many negatives per image and iteration (0 keeps all).
    pub max_negatives: usize,
    pub seed: u64,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            merge: MergeConfig::default(),
            hidden: DEFAULT_HIDDEN,
            batch_size: 8,
            pool: 7,
            max_negatives: 0,
            seed: 0,
            parallelism: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.sampler.validate()?;
        self.merge.validate()?;
        if self.hidden == 0 || self.batch_size == 0 || self.pool == 0 {
            return Err(Error::Config(
                "hidden, batch_size and pool must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch training summary. Mean losses over the epoch's steps; mIoU of
/// the pseudo boxes produced online during the epoch, per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub l_cbp: f64,
    pub l_pbr: Vec<f64>,
    pub l_total: f64,
    pub miou_pred: Vec<f64>,
}

impl EpochRecord {
    pub fn csv_header(stages: usize) -> String {
        let mut h = String::from("epoch,lr,L_cbp");
        for t in 1..=stages {
            h.push_str(&format!(",L_pbr{t}"));
        }
        h.push_str(",L_total,mIoU_cbp");
        for t in 1..=stages {
            h.push_str(&format!(",mIoU_pbr{t}"));
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!("{},{},{:.6}", self.epoch, self.lr, self.l_cbp);
        for l in &self.l_pbr {
            r.push_str(&format!(",{l:.6}"));
        }
        r.push_str(&format!(",{:.6}", self.l_total));
        for m in &self.miou_pred {
            r.push_str(&format!(",{m:.6}"));
        }
        r
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    /// Final pseudo boxes per stage (`[0]` coarse, `[t]` refinement `t`).
    pub pseudo: Vec<HashMap<u64, BBox>>,
    pub history: Vec<EpochRecord>,
}

impl TrainOutput {
    /// Pseudo boxes of the last stage.
    pub fn final_pseudo(&self) -> &HashMap<u64, BBox> {
        self.pseudo.last().expect("at least the coarse stage")
    }
}

/// The objects of one image with their coarse bags, which never change.
struct ImageCtx<'a> {
    scene: &'a Scene,
    shape: ImageShape,
    objects: Vec<&'a ObjectRecord>,
    categories: Vec<usize>,
    cbp: StageInput,
    cbp_bags: Vec<ProposalBag>,
}

fn build_contexts<'a>(
    ds: &'a Dataset,
    scenes: &'a [Scene],
    sampler: &SamplerConfig,
    pool: usize,
    par: Parallelism,
) -> Result<Vec<ImageCtx<'a>>> {
    let by_id: HashMap<u64, &Scene> = scenes.iter().map(|s| (s.image_id, s)).collect();
    let k = ds.num_categories();
    let groups: Vec<(u64, Vec<usize>)> = ds
        .objects_by_image()
        .into_iter()
        .filter(|(_, v)| !v.is_empty())
        .collect();
    par.try_map(&groups, |(image_id, idx)| {
        let scene = *by_id.get(image_id).ok_or(Error::MissingScene {
            image_id: *image_id,
        })?;
        let shape = ds.image(*image_id).map(|i| i.shape).unwrap_or(scene.shape);
        let objects: Vec<&ObjectRecord> = idx.iter().map(|&i| &ds.objects[i]).collect();
        let mut categories = Vec::with_capacity(objects.len());
        let mut bags = Vec::with_capacity(objects.len());
        for o in &objects {
            let p = o.point.as_ref().ok_or(Error::MissingPoint {
                object_id: o.object_id,
            })?;
            if p.category >= k {
                return Err(Error::Schema {
                    record: format!("annotation {}", o.object_id),
                    reason: format!("category {} out of range", p.category),
                });
            }
            categories.push(p.category);
            bags.push(cbp_bag(o.object_id, p, shape, sampler)?);
        }
        let cbp = stack_input(scene, &bags, &[], pool);
        Ok(ImageCtx {
            scene,
            shape,
            objects,
            categories,
            cbp,
            cbp_bags: bags,
        })
    })
}

fn stack_input(scene: &Scene, bags: &[ProposalBag], negatives: &[BBox], pool: usize) -> StageInput {
    let mut boxes: Vec<BBox> =
        Vec::with_capacity(bags.iter().map(|b| b.len()).sum::<usize>() + negatives.len());
    let mut bag_rows = Vec::with_capacity(bags.len());
    for b in bags {
        let at = boxes.len();
        boxes.extend_from_slice(&b.proposals);
        bag_rows.push(at..boxes.len());
    }
    boxes.extend_from_slice(negatives);
    let features = if boxes.is_empty() {
        Array2::zeros((0, feature_dim(pool, scene.d_pix)))
    } else {
        scene.featurize_all(&boxes, pool)
    };
    StageInput {
        features,
        bag_rows,
        num_neg: negatives.len(),
    }
}

fn merge_stage(
    bags: &[ProposalBag],
    bundles: &[ScoreBundle],
    categories: &[usize],
    merge: &MergeConfig,
) -> Result<Vec<BBox>> {
    bags.iter()
        .zip(bundles)
        .zip(categories)
        .map(|((bag, b), &k)| {
            let scores = match merge.score_source {
                ScoreSource::Bag => b.s.view(),
                ScoreSource::Cls => b.s_cls.view(),
            };
            merge_topk(bag, scores, k, merge.k)
        })
        .collect()
}

/// Everything produced by one pass of the cascade over one image.
struct Cascade {
    problem: ImageProblem,
    forwards: Vec<StageForward>,
    bags: Vec<Vec<ProposalBag>>,
    merged: Vec<Vec<BBox>>,
}

/// Runs the cascade through `stages` refinement iterations. Negatives are
/// sampled only when `neg_seed` is given.
fn run_cascade(
    params: &ModelParams,
    ctx: &ImageCtx<'_>,
    stages: usize,
    sampler: &SamplerConfig,
    merge: &MergeConfig,
    pool: usize,
    neg: Option<(u64, usize)>,
) -> Result<Cascade> {
    let mut problem = ImageProblem {
        categories: ctx.categories.clone(),
        stages: vec![ctx.cbp.clone()],
    };
    let f0 = forward_stage(params, 0, &problem.stages[0])?;
    let mut merged = vec![merge_stage(
        &ctx.cbp_bags,
        &f0.bundles,
        &ctx.categories,
        merge,
    )?];
    let mut forwards = vec![f0];
    let mut bags = vec![ctx.cbp_bags.clone()];
    for t in 1..=stages {
        let stage_bags = ctx
            .objects
            .iter()
            .zip(&merged[t - 1])
            .map(|(o, b_star)| pbr_bag(o.object_id, b_star, ctx.shape, sampler, t))
            .collect::<Result<Vec<_>>>()?;
        let negatives = match neg {
            Some((rng_seed, cap)) => {
                let mut n = sample_negatives(
                    ctx.scene.image_id,
                    &stage_bags,
                    ctx.shape,
                    sampler,
                    seed::mix(rng_seed, t as u64),
                )?
                .negatives;
                if cap > 0 && n.len() > cap {
                    n.truncate(cap);
                }
                n
            }
            None => Vec::new(),
        };
        let input = stack_input(ctx.scene, &stage_bags, &negatives, pool);
        let mut f = forward_stage(params, t, &input)?;
        for (b, p) in f.bundles.iter_mut().zip(&forwards[t - 1].bundles) {
            b.prev_bag_score = Some(p.bag_score.clone());
        }
        merged.push(merge_stage(
            &stage_bags,
            &f.bundles,
            &ctx.categories,
            merge,
        )?);
        problem.stages.push(input);
        forwards.push(f);
        bags.push(stage_bags);
    }
    Ok(Cascade {
        problem,
        forwards,
        bags,
        merged,
    })
}

pub fn train_p2bnet(ds: &Dataset, scenes: &[Scene], cfg: &TrainConfig) -> Result<TrainOutput> {
    train_p2bnet_with(ds, scenes, cfg, |_| {})
}

/// Trains the cascade, calling `on_epoch` after every epoch.
pub fn train_p2bnet_with(
    ds: &Dataset,
    scenes: &[Scene],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let par = cfg.parallelism;
    let stages = cfg.loss.stages;
    let contexts = build_contexts(ds, scenes, &cfg.sampler, cfg.pool, par)?;
    let d_pix = scenes
        .first()
        .map(|s| s.d_pix)
        .ok_or_else(|| Error::Config("no scenes".into()))?;
    let mut params = ModelParams::new(
        feature_dim(cfg.pool, d_pix),
        cfg.hidden,
        ds.num_categories(),
        stages,
        cfg.seed,
    );
    let mut velocity = params.zeros_like();
    let mut order: Vec<usize> = (0..contexts.len()).collect();
    let mut history = Vec::with_capacity(cfg.loss.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.loss.epochs {
        let lr = cfg.loss.lr_at(epoch);
        order.shuffle(&mut seed::rng(&[cfg.seed, 0x0D, epoch as u64]));
        let mut online: Vec<HashMap<u64, BBox>> = vec![HashMap::new(); stages + 1];
        let mut sums = (0.0, vec![0.0; stages], 0.0);
        let mut n_steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let cascades = par.try_map(batch, |&i| {
                let ctx = &contexts[i];
                let neg_seed = seed::derive(&[cfg.seed, epoch as u64, ctx.scene.image_id]);
                run_cascade(
                    &params,
                    ctx,
                    stages,
                    &cfg.sampler,
                    &cfg.merge,
                    cfg.pool,
                    Some((neg_seed, cfg.max_negatives)),
                )
            })?;
            for (&i, c) in batch.iter().zip(&cascades) {
                for (t, boxes) in c.merged.iter().enumerate() {
                    for (o, b) in contexts[i].objects.iter().zip(boxes) {
                        online[t].insert(o.object_id, *b);
                    }
                }
            }
            let (problems, forwards): (Vec<ImageProblem>, Vec<Vec<StageForward>>) = cascades
                .into_iter()
                .map(|c| (c.problem, c.forwards))
                .unzip();
            let weights: Vec<_> = problems
                .iter()
                .zip(&forwards)
                .map(|(p, f)| prev_weights(p, f))
                .collect();
            let (report, grads) =
                backward_batch(&params, &problems, &forwards, &weights, &cfg.loss, par);
            check_finite(&report, &grads, epoch, step)?;
            if cfg.loss.momentum > 0.0 {
                for (v, g) in velocity.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (vi, gi) in v.iter_mut().zip(g) {
                        *vi = cfg.loss.momentum * *vi + gi;
                    }
                }
                params.add_scaled(-lr, &velocity);
            } else {
                params.add_scaled(-lr, &grads);
            }
            sums.0 += report.l_cbp;
            for (s, l) in sums.1.iter_mut().zip(&report.l_pbr) {
                *s += l;
            }
            sums.2 += report.l_total;
            n_steps += 1;
            step += 1;
        }
        let n = n_steps.max(1) as f64;
        let subset = subset_dataset(ds, &contexts);
        let record = EpochRecord {
            epoch,
            lr,
            l_cbp: sums.0 / n,
            l_pbr: sums.1.iter().map(|s| s / n).collect(),
            l_total: sums.2 / n,
            miou_pred: online
                .iter()
                .map(|m| miou_pred(m, &subset))
                .collect::<Result<_>>()?,
        };
        on_epoch(&record);
        history.push(record);
    }
    let pseudo = predict_contexts(
        &params,
        &contexts,
        stages,
        &cfg.sampler,
        &cfg.merge,
        cfg.pool,
        par,
    )?
    .pseudo;
    Ok(TrainOutput {
        params,
        pseudo,
        history,
    })
}

fn check_finite(report: &LossReport, grads: &ModelParams, epoch: usize, step: usize) -> Result<()> {
    if report.is_finite() && grads.is_finite() {
        return Ok(());
    }
    Err(Error::Diverged {
        epoch,
        step,
        report: report.to_string(),
    })
}

/// The dataset restricted to the objects that were trained on.
fn subset_dataset(ds: &Dataset, contexts: &[ImageCtx<'_>]) -> Dataset {
    Dataset {
        images: ds.images.clone(),
        objects: contexts
            .iter()
            .flat_map(|c| c.objects.iter().map(|o| (*o).clone()))
            .collect(),
        categories: ds.categories.clone(),
    }
}

/// Inference output: pseudo boxes and proposal bags per stage.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub pseudo: Vec<HashMap<u64, BBox>>,
    pub bags: Vec<Vec<ProposalBag>>,
}

fn predict_contexts(
    params: &ModelParams,
    contexts: &[ImageCtx<'_>],
    stages: usize,
    sampler: &SamplerConfig,
    merge: &MergeConfig,
    pool: usize,
    par: Parallelism,
) -> Result<Prediction> {
    let cascades = par.try_map(contexts, |ctx| {
        run_cascade(params, ctx, stages, sampler, merge, pool, None)
    })?;
    let mut pseudo = vec![HashMap::new(); stages + 1];
    let mut bags = vec![Vec::new(); stages + 1];
    for (ctx, c) in contexts.iter().zip(cascades) {
        for (t, (boxes, stage_bags)) in c.merged.into_iter().zip(c.bags).enumerate() {
            for (o, b) in ctx.objects.iter().zip(boxes) {
                pseudo[t].insert(o.object_id, b);
            }
            bags[t].extend(stage_bags);
        }
    }
    Ok(Prediction { pseudo, bags })
}

/// Runs the trained cascade on every object with a point annotation.
/// `stages` may not exceed the model's refinement iterations.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    params: &ModelParams,
    ds: &Dataset,
    scenes: &[Scene],
    stages: usize,
    sampler: &SamplerConfig,
    merge: &MergeConfig,
    pool: usize,
    par: Parallelism,
) -> Result<Prediction> {
    if stages > params.refinement_iters() {
        return Err(Error::Config(format!(
            "model has {} refinement heads, {stages} requested",
            params.refinement_iters()
        )));
    }
    merge.validate()?;
    let contexts = build_contexts(ds, scenes, sampler, pool, par)?;
    predict_contexts(params, &contexts, stages, sampler, merge, pool, par)
}

/// Full-batch objective of the current parameters, for diagnostics.
pub fn evaluate_objective(
    params: &ModelParams,
    ds: &Dataset,
    scenes: &[Scene],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossReport> {
    let contexts = build_contexts(ds, scenes, &cfg.sampler, cfg.pool, cfg.parallelism)?;
    let cascades = cfg.parallelism.try_map(&contexts, |ctx| {
        let neg_seed = seed::derive(&[cfg.seed, epoch as u64, ctx.scene.image_id]);
        run_cascade(
            params,
            ctx,
            cfg.loss.stages,
            &cfg.sampler,
            &cfg.merge,
            cfg.pool,
            Some((neg_seed, cfg.max_negatives)),
        )
    })?;
    let problems: Vec<ImageProblem> = cascades.into_iter().map(|c| c.problem).collect();
    let forwards = cfg
        .parallelism
        .try_map(&problems, |p| forward_image(params, p))?;
    let weights: Vec<_> = problems
        .iter()
        .zip(&forwards)
        .map(|(p, f)| prev_weights(p, f))
        .collect();
    Ok(backward_batch(
        params,
        &problems,
        &forwards,
        &weights,
        &cfg.loss,
        cfg.parallelism,
    )
    .0)
}
