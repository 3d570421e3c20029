//! Two-stream MIL scorer: a shared two-layer trunk and one
//! classification/instance head pair per stage.
//!
//! Stage 0 is the coarse stage (softmax over categories); stages `1..=T`
//! are refinement iterations (sigmoid, multi-label). The instance stream
//! is always a softmax over the proposals of a bag.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{io_err, Error, Result};
use crate::seed;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"P2BCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// The trunk width used unless configured otherwise.
pub const DEFAULT_HIDDEN: usize = 128;

/// `x W + b`, with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Array2::zeros((d_in, d_out)),
            bias: Array1::zeros(d_out),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero bias.
    fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight =
            Array2::from_shape_simple_fn((d_in, d_out), || rng.random_range(-bound..=bound));
        Self {
            weight,
            bias: Array1::zeros(d_out),
        }
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = x.dot(&self.weight);
        out += &self.bias;
        out
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadPair {
    pub cls: Affine,
    pub ins: Affine,
}

/// All learnable tensors. The same type doubles as the gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub trunk: [Affine; 2],
    /// `heads[0]` is the coarse stage, `heads[t]` refinement iteration `t`.
    pub heads: Vec<HeadPair>,
}

impl ModelParams {
    pub fn new(
        d_in: usize,
        d_hidden: usize,
        num_classes: usize,
        refinement_iters: usize,
        seed: u64,
    ) -> Self {
        let mut rng = seed::rng(&[seed, 0x1417]);
        let trunk = [
            Affine::init(d_in, d_hidden, &mut rng),
            Affine::init(d_hidden, d_hidden, &mut rng),
        ];
        let heads = (0..=refinement_iters)
            .map(|_| HeadPair {
                cls: Affine::init(d_hidden, num_classes, &mut rng),
                ins: Affine::init(d_hidden, num_classes, &mut rng),
            })
            .collect();
        Self { trunk, heads }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |a: &Affine| Affine::zeros(a.d_in(), a.d_out());
        Self {
            trunk: [z(&self.trunk[0]), z(&self.trunk[1])],
            heads: self
                .heads
                .iter()
                .map(|h| HeadPair {
                    cls: z(&h.cls),
                    ins: z(&h.ins),
                })
                .collect(),
        }
    }

    pub fn d_in(&self) -> usize {
        self.trunk[0].d_in()
    }

    pub fn d_hidden(&self) -> usize {
        self.trunk[0].d_out()
    }

    pub fn num_classes(&self) -> usize {
        self.heads[0].cls.d_out()
    }

    /// Number of refinement iterations `T`.
    pub fn refinement_iters(&self) -> usize {
        self.heads.len() - 1
    }

    fn affines(&self) -> Vec<&Affine> {
        let mut v = vec![&self.trunk[0], &self.trunk[1]];
        for h in &self.heads {
            v.push(&h.cls);
            v.push(&h.ins);
        }
        v
    }

    fn affines_mut(&mut self) -> Vec<&mut Affine> {
        let [t0, t1] = &mut self.trunk;
        let mut v = vec![t0, t1];
        for h in &mut self.heads {
            v.push(&mut h.cls);
            v.push(&mut h.ins);
        }
        v
    }

    /// Every tensor as a flat slice, in checkpoint order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.affines()
            .into_iter()
            .flat_map(|a| {
                [
                    a.weight.as_slice().expect("standard layout"),
                    a.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.affines_mut()
            .into_iter()
            .flat_map(|a| {
                [
                    a.weight.as_slice_mut().expect("standard layout"),
                    a.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            CHECKPOINT_VERSION,
            self.d_in() as u32,
            self.d_hidden() as u32,
            self.num_classes() as u32,
            self.heads.len() as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for a in self.affines() {
            for (rows, cols, data) in [
                (
                    a.d_in(),
                    a.d_out(),
                    a.weight.as_slice().expect("standard layout"),
                ),
                (1, a.d_out(), a.bias.as_slice().expect("standard layout")),
            ] {
                buf.extend_from_slice(&(rows as u32).to_le_bytes());
                buf.extend_from_slice(&(cols as u32).to_le_bytes());
                for v in data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        w.write_all(&buf).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::BadBinary {
            path: path.to_path_buf(),
            reason,
        };
        let file = File::open(path).map_err(io_err(path))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(io_err(path))?;
        let mut cur = bytes.as_slice();
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad("truncated".into()));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("wrong magic".into()));
        }
        let mut u32s = [0u32; 5];
        for v in &mut u32s {
            *v = u32::from_le_bytes(take(4)?.try_into().unwrap());
        }
        let [version, d_in, d_hidden, k, n_heads] = u32s.map(|v| v as usize);
        if version != CHECKPOINT_VERSION as usize {
            return Err(bad(format!("unsupported version {version}")));
        }
        if n_heads == 0 {
            return Err(bad("no heads".into()));
        }
        let mut params = ModelParams::new(d_in, d_hidden, k, n_heads - 1, 0).zeros_like();
        for a in params.affines_mut() {
            let (want_rows, cols) = (a.d_in(), a.d_out());
            for (rows, dst) in [
                (want_rows, a.weight.as_slice_mut().expect("standard layout")),
                (1, a.bias.as_slice_mut().expect("standard layout")),
            ] {
                let hr = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
                let hc = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
                if (hr, hc) != (rows, cols) {
                    return Err(bad(format!(
                        "tensor shape {hr}x{hc}, expected {rows}x{cols}"
                    )));
                }
                for d in dst.iter_mut() {
                    *d = f64::from_le_bytes(take(8)?.try_into().unwrap());
                }
            }
        }
        if !cur.is_empty() {
            return Err(bad(format!("{} trailing bytes", cur.len())));
        }
        Ok(params)
    }
}

/// Activation of the classification stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClsActivation {
    /// Softmax across categories (coarse stage).
    Softmax,
    /// Independent sigmoids (refinement stages).
    Sigmoid,
}

impl ClsActivation {
    pub fn for_stage(stage_index: usize) -> Self {
        if stage_index == 0 {
            ClsActivation::Softmax
        } else {
            ClsActivation::Sigmoid
        }
    }
}

/// Trunk activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TrunkCache {
    pub h1: Array2<f64>,
    pub h2: Array2<f64>,
}

pub fn trunk_forward(params: &ModelParams, x: ArrayView2<'_, f64>) -> TrunkCache {
    let mut h1 = params.trunk[0].apply(x);
    h1.mapv_inplace(f64::tanh);
    let mut h2 = params.trunk[1].apply(h1.view());
    h2.mapv_inplace(f64::tanh);
    TrunkCache { h1, h2 }
}

/// Scores of one bag under one head.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBundle {
    pub o_cls: Array2<f64>,
    pub o_ins: Array2<f64>,
    pub s_cls: Array2<f64>,
    pub s_ins: Array2<f64>,
    /// `s_cls` times `s_ins`, elementwise.
    pub s: Array2<f64>,
    /// Column sums of `s`.
    pub bag_score: Array1<f64>,
    /// Bag score of the previous stage, for refinement heads.
    pub prev_bag_score: Option<Array1<f64>>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(o: &Array2<f64>) -> Array2<f64> {
    let mut s = o.clone();
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    s
}

fn softmax_cols(o: &Array2<f64>) -> Array2<f64> {
    let mut s = o.clone();
    for mut col in s.columns_mut() {
        let m = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        col.mapv_inplace(|v| (v - m).exp());
        let z = col.sum();
        col /= z;
    }
    s
}

/// Both streams on trunk output `h` (one row per proposal).
pub fn head_scores(h: ArrayView2<'_, f64>, head: &HeadPair, act: ClsActivation) -> ScoreBundle {
    let o_cls = head.cls.apply(h);
    let o_ins = head.ins.apply(h);
    let s_cls = match act {
        ClsActivation::Softmax => softmax_rows(&o_cls),
        ClsActivation::Sigmoid => o_cls.mapv(sigmoid),
    };
    let s_ins = softmax_cols(&o_ins);
    let s = &s_cls * &s_ins;
    let bag_score = s.sum_axis(Axis(0)).mapv(|v| v.min(1.0));
    ScoreBundle {
        o_cls,
        o_ins,
        s_cls,
        s_ins,
        s,
        bag_score,
        prev_bag_score: None,
    }
}

fn check_input(
    features: ArrayView2<'_, f64>,
    params: &ModelParams,
    head_index: usize,
) -> Result<()> {
    if features.nrows() == 0 {
        return Err(Error::Shape("bag has no proposals".into()));
    }
    if features.ncols() != params.d_in() {
        return Err(Error::Shape(format!(
            "feature dim {} != model input {}",
            features.ncols(),
            params.d_in()
        )));
    }
    if head_index >= params.heads.len() {
        return Err(Error::Shape(format!(
            "head {head_index} out of range ({} heads)",
            params.heads.len()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("proposal features".into()));
    }
    Ok(())
}

/// Coarse-stage scoring of one bag.
pub fn forward_cbp(
    features: ArrayView2<'_, f64>,
    params: &ModelParams,
    head_index: usize,
) -> Result<ScoreBundle> {
    check_input(features, params, head_index)?;
    let trunk = trunk_forward(params, features);
    Ok(head_scores(
        trunk.h2.view(),
        &params.heads[head_index],
        ClsActivation::Softmax,
    ))
}

/// Refinement-stage scoring of one bag.
pub fn forward_pbr(
    features: ArrayView2<'_, f64>,
    params: &ModelParams,
    head_index: usize,
    prev_bag_score: ArrayView1<'_, f64>,
) -> Result<ScoreBundle> {
    check_input(features, params, head_index)?;
    if prev_bag_score.len() != params.num_classes() {
        return Err(Error::Shape(
            "previous bag score has the wrong length".into(),
        ));
    }
    let trunk = trunk_forward(params, features);
    let mut bundle = head_scores(
        trunk.h2.view(),
        &params.heads[head_index],
        ClsActivation::Sigmoid,
    );
    bundle.prev_bag_score = Some(prev_bag_score.to_owned());
    Ok(bundle)
}

/// Sigmoid classification scores of negatives; no instance stream.
pub fn score_negatives(
    features: ArrayView2<'_, f64>,
    params: &ModelParams,
    head_index: usize,
) -> Result<Array2<f64>> {
    check_input(features, params, head_index)?;
    let trunk = trunk_forward(params, features);
    Ok(params.heads[head_index]
        .cls
        .apply(trunk.h2.view())
        .mapv(sigmoid))
}
