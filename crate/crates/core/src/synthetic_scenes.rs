//! Synthetic scenes standing in for a convolutional backbone.
//!
//! Each scene is a lattice of `D_pix`-dimensional signature vectors sampled
//! every `stride` pixels. Vertices inside an object's box carry the
//! category's unit signature; every vertex gets zero-mean Gaussian noise,
//! optionally smoothed over a square window so that nearby vertices share
//! it.
//! Proposals are featurized RoIAlign-style: `P x P` bins, each averaging
//! bilinear samples on a sub-lattice whose density adapts to the bin size,
//! followed by four normalized box-shape features.
//!
//! Tight boxes are distinguishable because a box larger than the object
//! dilutes the signature with background, while a box smaller than the
//! object averages fewer independent noise draws.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayViewMut1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::annotations::{Category, Dataset, ImageInfo, ObjectRecord};
use crate::error::{io_err, Error, Result};
use crate::geometry::{iou, BBox, ImageShape};
use crate::seed;

pub const GRID_MAGIC: &[u8; 8] = b"P2BGRID\0";
pub const GRID_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub num_images: usize,
    pub width: u32,
    pub height: u32,
    pub num_categories: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Object side range in pixels; sides are snapped to the stride.
    pub size_min: u32,
    pub size_max: u32,
    pub max_overlap_iou: f64,
    /// Per-channel standard deviation of the noise at every vertex.
    pub noise_std: f64,
    /// Noise correlation radius in vertices; 0 gives independent vertices.
    pub noise_radius: usize,
    pub d_pix: usize,
    pub stride: u32,
    pub pool: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_images: 200,
            width: 128,
            height: 128,
            num_categories: 5,
            objects_min: 1,
            objects_max: 4,
            size_min: 16,
            size_max: 64,
            max_overlap_iou: 0.5,
            noise_std: 0.5,
            noise_radius: 0,
            d_pix: 8,
            stride: 4,
            pool: 7,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.pool < 1 {
            return bad("pool must be >= 1");
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return bad("noise_std must be >= 0");
        }
        if self.num_categories == 0 || self.num_categories > self.d_pix {
            return bad("need 1 <= num_categories <= d_pix for orthogonal signatures");
        }
        if self.stride == 0 || self.width < self.stride || self.height < self.stride {
            return bad("stride must be positive and smaller than the image");
        }
        if self.objects_min > self.objects_max
            || self.size_min > self.size_max
            || self.size_min < self.stride
        {
            return bad("object count/size ranges are inverted or below one stride");
        }
        if self.size_max > self.width.min(self.height) {
            return bad("size_max exceeds image");
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.pool, self.d_pix)
    }
}

/// `P^2 * D_pix + 4`.
pub fn feature_dim(pool: usize, d_pix: usize) -> usize {
    pool * pool * d_pix + 4
}

/// Signature lattice of one image. Vertex `(col, row)` sits at pixel
/// `(col * stride, row * stride)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: u64,
    pub shape: ImageShape,
    pub stride: u32,
    pub d_pix: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    /// Row-major `grid_h x grid_w x d_pix`.
    pub grid: Vec<f32>,
    pub objects: Vec<ObjectRecord>,
}

impl Scene {
    pub fn empty(image_id: u64, shape: ImageShape, stride: u32, d_pix: usize) -> Self {
        let grid_w = (shape.width / stride as f64).floor() as usize + 1;
        let grid_h = (shape.height / stride as f64).floor() as usize + 1;
        Self {
            image_id,
            shape,
            stride,
            d_pix,
            grid_w,
            grid_h,
            grid: vec![0.0; grid_w * grid_h * d_pix],
            objects: Vec::new(),
        }
    }

    pub fn vertex(&self, col: usize, row: usize) -> &[f32] {
        let at = (row * self.grid_w + col) * self.d_pix;
        &self.grid[at..at + self.d_pix]
    }

    fn vertex_mut(&mut self, col: usize, row: usize) -> &mut [f32] {
        let at = (row * self.grid_w + col) * self.d_pix;
        &mut self.grid[at..at + self.d_pix]
    }

    /// Writes `signature` (elementwise max) onto every vertex inside the
    /// closed box.
    pub fn paint(&mut self, b: &BBox, signature: &[f32]) {
        let [x1, y1, x2, y2] = b.corners();
        let s = self.stride as f64;
        let c0 = (x1 / s).ceil().max(0.0) as usize;
        let c1 = ((x2 / s).floor() as usize).min(self.grid_w - 1);
        let r0 = (y1 / s).ceil().max(0.0) as usize;
        let r1 = ((y2 / s).floor() as usize).min(self.grid_h - 1);
        for row in r0..=r1 {
            for col in c0..=c1 {
                for (v, &sig) in self.vertex_mut(col, row).iter_mut().zip(signature) {
                    *v = v.max(sig);
                }
            }
        }
    }

    /// Adds `d_pix`-dimensional bilinear sample at pixel `(x, y)` into `out`.
    #[inline]
    fn accumulate_bilinear(&self, x: f64, y: f64, out: &mut [f64]) {
        let s = self.stride as f64;
        let gx = (x / s).clamp(0.0, (self.grid_w - 1) as f64);
        let gy = (y / s).clamp(0.0, (self.grid_h - 1) as f64);
        let c0 = (gx.floor() as usize).min(self.grid_w.saturating_sub(2));
        let r0 = (gy.floor() as usize).min(self.grid_h.saturating_sub(2));
        let (tx, ty) = (gx - c0 as f64, gy - r0 as f64);
        let c1 = (c0 + 1).min(self.grid_w - 1);
        let r1 = (r0 + 1).min(self.grid_h - 1);
        let weights = [
            ((1.0 - tx) * (1.0 - ty), c0, r0),
            (tx * (1.0 - ty), c1, r0),
            ((1.0 - tx) * ty, c0, r1),
            (tx * ty, c1, r1),
        ];
        for (w, c, r) in weights {
            if w == 0.0 {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(self.vertex(c, r)) {
                *o += w * v as f64;
            }
        }
    }

    /// Feature vector of one proposal; see [`featurize_into`].
    pub fn featurize(&self, b: &BBox, pool: usize) -> Vec<f64> {
        let mut out = vec![0.0; feature_dim(pool, self.d_pix)];
        featurize_into(self, b, pool, ArrayViewMut1::from(&mut out[..]));
        out
    }

    /// One feature row per box.
    pub fn featurize_all(&self, boxes: &[BBox], pool: usize) -> Array2<f64> {
        let mut out = Array2::zeros((boxes.len(), feature_dim(pool, self.d_pix)));
        for (b, row) in boxes.iter().zip(out.rows_mut()) {
            featurize_into(self, b, pool, row);
        }
        out
    }
}

/// RoIAlign-style pooling: bin `(i, j)` of a `pool x pool` partition averages
/// `n_x * n_y` bilinear samples, `n = ceil(bin_size / stride)`. The last four
/// entries are `w / W`, `h / H`, `cx / W`, `cy / H`.
pub fn featurize_into(scene: &Scene, b: &BBox, pool: usize, mut out: ArrayViewMut1<'_, f64>) {
    let d = scene.d_pix;
    out.fill(0.0);
    let [x1, y1, _, _] = b.corners();
    let (bin_w, bin_h) = (b.w / pool as f64, b.h / pool as f64);
    let s = scene.stride as f64;
    let nx = ((bin_w / s).ceil() as usize).max(1);
    let ny = ((bin_h / s).ceil() as usize).max(1);
    let norm = 1.0 / (nx * ny) as f64;
    let mut acc = vec![0.0f64; d];
    for by in 0..pool {
        for bx in 0..pool {
            acc.fill(0.0);
            for sy in 0..ny {
                let y = y1 + by as f64 * bin_h + (sy as f64 + 0.5) * bin_h / ny as f64;
                for sx in 0..nx {
                    let x = x1 + bx as f64 * bin_w + (sx as f64 + 0.5) * bin_w / nx as f64;
                    scene.accumulate_bilinear(x, y, &mut acc);
                }
            }
            let base = (by * pool + bx) * d;
            for (k, a) in acc.iter().enumerate() {
                out[base + k] = a * norm;
            }
        }
    }
    let tail = pool * pool * d;
    out[tail] = b.w / scene.shape.width;
    out[tail + 1] = b.h / scene.shape.height;
    out[tail + 2] = b.cx / scene.shape.width;
    out[tail + 3] = b.cy / scene.shape.height;
}

/// Category `k` maps to the `k`-th standard basis vector.
pub fn signature(category: usize, d_pix: usize) -> Vec<f32> {
    let mut v = vec![0.0; d_pix];
    v[category] = 1.0;
    v
}

const PLACEMENT_RETRIES: usize = 200;

/// Unit-variance Gaussian field of shape `gh x gw x d`, averaged over a
/// `(2r + 1)^2` window of i.i.d. draws and rescaled to unit variance.
fn smooth_noise(rng: &mut impl Rng, gw: usize, gh: usize, d: usize, r: usize) -> Vec<f64> {
    let (pw, ph) = (gw + 2 * r, gh + 2 * r);
    let white: Vec<f64> = (0..pw * ph * d)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    if r == 0 {
        return white;
    }
    let win = 2 * r + 1;
    let scale = 1.0 / win as f64;
    // Horizontal pass: ph x gw x d.
    let mut horiz = vec![0.0; ph * gw * d];
    for y in 0..ph {
        for x in 0..gw {
            let dst = (y * gw + x) * d;
            for dx in 0..win {
                let src = (y * pw + x + dx) * d;
                for c in 0..d {
                    horiz[dst + c] += white[src + c];
                }
            }
        }
    }
    let mut out = vec![0.0; gh * gw * d];
    for y in 0..gh {
        for x in 0..gw {
            let dst = (y * gw + x) * d;
            for dy in 0..win {
                let src = ((y + dy) * gw + x) * d;
                for c in 0..d {
                    out[dst + c] += horiz[src + c];
                }
            }
        }
    }
    for v in &mut out {
        *v *= scale;
    }
    out
}

/// Generates the dataset and its scenes. Reproducible given `cfg.seed`.
pub fn generate_dataset(cfg: &SceneConfig) -> Result<(Dataset, Vec<Scene>)> {
    cfg.validate()?;
    let shape = ImageShape::new(cfg.width as f64, cfg.height as f64)?;
    let stride = cfg.stride;
    let categories = (0..cfg.num_categories)
        .map(|k| Category {
            id: k as u64 + 1,
            name: format!("class_{k}"),
        })
        .collect();
    let mut images = Vec::with_capacity(cfg.num_images);
    let mut objects = Vec::new();
    let mut scenes = Vec::with_capacity(cfg.num_images);
    let mut next_object = 1u64;
    let snap_lo = cfg.size_min.div_ceil(stride);
    let snap_hi = cfg.size_max / stride;
    for idx in 0..cfg.num_images {
        let image_id = idx as u64 + 1;
        let mut rng = seed::rng(&[cfg.seed, image_id, 0x5C]);
        let count = rng.random_range(cfg.objects_min..=cfg.objects_max);
        let mut placed: Vec<ObjectRecord> = Vec::with_capacity(count);
        for _ in 0..count {
            let mut ok = None;
            for _ in 0..PLACEMENT_RETRIES {
                let w = rng.random_range(snap_lo..=snap_hi) * stride;
                let h = rng.random_range(snap_lo..=snap_hi) * stride;
                let x = rng.random_range(0..=(cfg.width - w) / stride) * stride;
                let y = rng.random_range(0..=(cfg.height - h) / stride) * stride;
                let b = BBox::from_xywh([x as f64, y as f64, w as f64, h as f64])?;
                if placed
                    .iter()
                    .all(|o| iou(&o.gt_box, &b) <= cfg.max_overlap_iou)
                {
                    ok = Some(b);
                    break;
                }
            }
            let gt_box = ok.ok_or_else(|| {
                Error::Generation(format!(
                    "could not place object {} in image {image_id}",
                    placed.len() + 1
                ))
            })?;
            placed.push(ObjectRecord {
                object_id: next_object,
                image_id,
                category: rng.random_range(0..cfg.num_categories),
                gt_box,
                mask: None,
                point: None,
            });
            next_object += 1;
        }
        let mut scene = Scene::empty(image_id, shape, stride, cfg.d_pix);
        for o in &placed {
            scene.paint(&o.gt_box, &signature(o.category, cfg.d_pix));
        }
        if cfg.noise_std > 0.0 {
            let noise = smooth_noise(
                &mut rng,
                scene.grid_w,
                scene.grid_h,
                cfg.d_pix,
                cfg.noise_radius,
            );
            for (v, z) in scene.grid.iter_mut().zip(noise) {
                *v += (cfg.noise_std * z) as f32;
            }
        }
        scene.objects = placed.clone();
        objects.extend(placed);
        images.push(ImageInfo {
            id: image_id,
            shape,
            file_name: format!("synth_{image_id:05}.png"),
        });
        scenes.push(scene);
    }
    let ds = Dataset {
        images,
        objects,
        categories,
    };
    ds.validate()?;
    Ok((ds, scenes))
}

// Sidecar: magic, version, scene count, then per scene
// image_id u64, width u32, height u32, stride u32, d_pix u32, grid_w u32,
// grid_h u32, and grid_h * grid_w * d_pix little-endian f32.

pub fn write_scenes(scenes: &[Scene], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(io_err(path));
    put(GRID_MAGIC)?;
    put(&GRID_VERSION.to_le_bytes())?;
    put(&(scenes.len() as u32).to_le_bytes())?;
    for s in scenes {
        put(&s.image_id.to_le_bytes())?;
        for v in [
            s.shape.width as u32,
            s.shape.height as u32,
            s.stride,
            s.d_pix as u32,
            s.grid_w as u32,
            s.grid_h as u32,
        ] {
            put(&v.to_le_bytes())?;
        }
        let mut body = Vec::with_capacity(s.grid.len() * 4);
        for v in &s.grid {
            body.extend_from_slice(&v.to_le_bytes());
        }
        put(&body)?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a sidecar; objects are attached from `dataset` by image id.
pub fn read_scenes(path: &Path, dataset: Option<&Dataset>) -> Result<Vec<Scene>> {
    let bad = |reason: String| Error::BadBinary {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != GRID_MAGIC {
        return Err(bad("wrong magic".into()));
    }
    let mut u32_at = || -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(io_err(path))?;
        Ok(u32::from_le_bytes(b))
    };
    let version = u32_at()?;
    if version != GRID_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = u32_at()? as usize;
    let mut scenes = Vec::with_capacity(count);
    for _ in 0..count {
        let mut head = [0u8; 8 + 6 * 4];
        r.read_exact(&mut head).map_err(io_err(path))?;
        let image_id = u64::from_le_bytes(head[0..8].try_into().unwrap());
        let field = |i: usize| u32::from_le_bytes(head[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        let (width, height, stride, d_pix, grid_w, grid_h) = (
            field(0),
            field(1),
            field(2),
            field(3) as usize,
            field(4) as usize,
            field(5) as usize,
        );
        let shape = ImageShape::new(width as f64, height as f64).map_err(|e| bad(e.to_string()))?;
        let expected = Scene::empty(image_id, shape, stride.max(1), d_pix);
        if stride == 0 || expected.grid_w != grid_w || expected.grid_h != grid_h {
            return Err(bad(format!(
                "inconsistent grid header for image {image_id}"
            )));
        }
        let mut body = vec![0u8; grid_w * grid_h * d_pix * 4];
        r.read_exact(&mut body).map_err(io_err(path))?;
        let grid = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let objects = dataset
            .map(|ds| {
                ds.objects
                    .iter()
                    .filter(|o| o.image_id == image_id)
                    .cloned()
                    .collect()
            })
            .unwrap_or_default();
        scenes.push(Scene {
            grid,
            objects,
            ..expected
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io_err(path))?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(scenes)
}
