//! COCO-style dataset ingestion and emission, plus quasi-center point
//! generation from a rectified Gaussian over the object's central region.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::geometry::{BBox, ImageShape, PointAnno};
use crate::seed;

/// Attempts per point before falling back to the mask centroid.
pub const REJECTION_BUDGET: usize = 10_000;

/// Binary raster over unit pixels. Pixel `(i, j)` covers
/// `[x0 + i, x0 + i + 1) x [y0 + j, y0 + j + 1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub x0: i64,
    pub y0: i64,
    pub width: usize,
    pub height: usize,
    /// Row-major, `height * width` entries.
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn from_box(b: &BBox) -> Self {
        let [x1, y1, x2, y2] = b.corners();
        let (x0, y0) = (x1.floor() as i64, y1.floor() as i64);
        let width = (x2.ceil() as i64 - x0).max(1) as usize;
        let height = (y2.ceil() as i64 - y0).max(1) as usize;
        Self {
            x0,
            y0,
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[j * self.width + i]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let i = (x.floor() as i64) - self.x0;
        let j = (y.floor() as i64) - self.y0;
        if i < 0 || j < 0 || i as usize >= self.width || j as usize >= self.height {
            return false;
        }
        self.get(i as usize, j as usize)
    }

    /// Tight corner rectangle around the set pixels.
    pub fn bounding_rect(&self) -> Option<[f64; 4]> {
        let mut rect: Option<[i64; 4]> = None;
        for j in 0..self.height {
            for i in 0..self.width {
                if self.get(i, j) {
                    let (x, y) = (self.x0 + i as i64, self.y0 + j as i64);
                    rect = Some(match rect {
                        None => [x, y, x + 1, y + 1],
                        Some([a, b, c, d]) => [a.min(x), b.min(y), c.max(x + 1), d.max(y + 1)],
                    });
                }
            }
        }
        rect.map(|r| r.map(|v| v as f64))
    }

    /// Centroid of the set pixel centers.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for j in 0..self.height {
            for i in 0..self.width {
                if self.get(i, j) {
                    sx += (self.x0 + i as i64) as f64 + 0.5;
                    sy += (self.y0 + j as i64) as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    fn to_rle(&self) -> MaskRle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for &bit in &self.bits {
            if bit == current {
                run += 1;
            } else {
                counts.push(run);
                current = bit;
                run = 1;
            }
        }
        counts.push(run);
        MaskRle {
            origin: [self.x0, self.y0],
            size: [self.width, self.height],
            counts,
        }
    }

    fn from_rle(rle: &MaskRle) -> std::result::Result<Self, String> {
        let [width, height] = rle.size;
        let total: u64 = rle.counts.iter().sum();
        if total != (width * height) as u64 {
            return Err(format!(
                "mask counts sum to {total}, expected {}",
                width * height
            ));
        }
        let mut bits = Vec::with_capacity(width * height);
        let mut value = false;
        for &c in &rle.counts {
            bits.extend(std::iter::repeat_n(value, c as usize));
            value = !value;
        }
        Ok(Self {
            x0: rle.origin[0],
            y0: rle.origin[1],
            width,
            height,
            bits,
        })
    }
}

/// One annotated object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRecord {
    pub object_id: u64,
    pub image_id: u64,
    pub category: usize,
    pub gt_box: BBox,
    pub mask: Option<Mask>,
    pub point: Option<PointAnno>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageInfo {
    pub id: u64,
    pub shape: ImageShape,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

/// Validated dataset. Category indices refer to positions in `categories`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageInfo>,
    pub objects: Vec<ObjectRecord>,
    pub categories: Vec<Category>,
}

impl Dataset {
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn image(&self, image_id: u64) -> Option<&ImageInfo> {
        self.images.iter().find(|im| im.id == image_id)
    }

    /// Object indices grouped by image, in image order.
    pub fn objects_by_image(&self) -> Vec<(u64, Vec<usize>)> {
        let mut groups: Vec<(u64, Vec<usize>)> =
            self.images.iter().map(|im| (im.id, Vec::new())).collect();
        let pos: HashMap<u64, usize> = self
            .images
            .iter()
            .enumerate()
            .map(|(i, im)| (im.id, i))
            .collect();
        for (idx, obj) in self.objects.iter().enumerate() {
            groups[pos[&obj.image_id]].1.push(idx);
        }
        groups
    }

    pub fn gt_boxes(&self) -> HashMap<u64, BBox> {
        self.objects
            .iter()
            .map(|o| (o.object_id, o.gt_box))
            .collect()
    }

    /// Checks referential integrity and per-record invariants.
    pub fn validate(&self) -> Result<()> {
        let k = self.categories.len();
        let mut shapes = HashMap::new();
        for im in &self.images {
            if shapes.insert(im.id, im.shape).is_some() {
                return Err(schema(format!("image {}", im.id), "duplicate image id"));
            }
        }
        let mut seen = HashSet::new();
        for obj in &self.objects {
            let record = format!("annotation {}", obj.object_id);
            if !seen.insert(obj.object_id) {
                return Err(schema(record, "duplicate annotation id"));
            }
            let shape = *shapes.get(&obj.image_id).ok_or(Error::DanglingImage {
                annotation_id: obj.object_id,
                image_id: obj.image_id,
            })?;
            if obj.category >= k {
                return Err(schema(
                    record,
                    format!("category index {} >= {k}", obj.category),
                ));
            }
            if !obj.gt_box.inside(shape, 1e-6) {
                return Err(schema(record, "bbox extends outside its image"));
            }
            if let Some(mask) = &obj.mask {
                let rect = mask
                    .bounding_rect()
                    .ok_or_else(|| schema(record.clone(), "empty mask"))?;
                let gt = obj.gt_box.corners();
                if rect
                    .iter()
                    .zip(&gt)
                    .any(|(a, b)| (a - b).abs() > 1.0 + 1e-9)
                {
                    return Err(schema(
                        record,
                        "mask bounds disagree with bbox by more than 1px",
                    ));
                }
            }
            if let Some(p) = &obj.point {
                if !shape.contains(p.x, p.y) {
                    return Err(schema(record, "point outside its image"));
                }
                if p.category != obj.category {
                    return Err(schema(
                        record,
                        "point category differs from object category",
                    ));
                }
            }
        }
        Ok(())
    }
}

fn schema(record: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Schema {
        record: record.into(),
        reason: reason.into(),
    }
}

// On-disk schema.

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    width: u32,
    height: u32,
    file_name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    point: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<MaskRle>,
}

/// Uncompressed run lengths over the row-major raster, starting with a
/// run of unset pixels.
#[derive(Debug, Serialize, Deserialize)]
struct MaskRle {
    origin: [i64; 2],
    size: [usize; 2],
    counts: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Rounds to the 2-decimal precision used for serialized boxes.
pub fn round2(v: f64) -> f64 {
    let r = (v * 100.0).round() / 100.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(io_err(path))?;
    let raw: CocoFile =
        serde_json::from_reader(BufReader::new(file)).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
    from_coco(raw)
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let raw: CocoFile = serde_json::from_str(text).map_err(|source| Error::Json {
        path: "<string>".into(),
        source,
    })?;
    from_coco(raw)
}

fn from_coco(raw: CocoFile) -> Result<Dataset> {
    let categories: Vec<Category> = raw
        .categories
        .into_iter()
        .map(|c| Category {
            id: c.id,
            name: c.name,
        })
        .collect();
    let cat_index: HashMap<u64, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id, i))
        .collect();
    if cat_index.len() != categories.len() {
        return Err(schema("categories", "duplicate category id"));
    }
    let images = raw
        .images
        .into_iter()
        .map(|im| {
            let shape = ImageShape::new(im.width as f64, im.height as f64)
                .map_err(|_| schema(format!("image {}", im.id), "non-positive size"))?;
            Ok(ImageInfo {
                id: im.id,
                shape,
                file_name: im.file_name,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let objects = raw
        .annotations
        .into_iter()
        .map(|a| {
            let record = format!("annotation {}", a.id);
            let category = *cat_index.get(&a.category_id).ok_or_else(|| {
                schema(
                    record.clone(),
                    format!("unknown category_id {}", a.category_id),
                )
            })?;
            let gt_box =
                BBox::from_xywh(a.bbox).map_err(|e| schema(record.clone(), e.to_string()))?;
            let mask = a
                .mask
                .as_ref()
                .map(Mask::from_rle)
                .transpose()
                .map_err(|e| schema(record.clone(), e))?;
            let point = a.point.map(|[x, y]| PointAnno { x, y, category });
            Ok(ObjectRecord {
                object_id: a.id,
                image_id: a.image_id,
                category,
                gt_box,
                mask,
                point,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset {
        images,
        objects,
        categories,
    };
    ds.validate()?;
    Ok(ds)
}

fn to_coco(ds: &Dataset, boxes: Option<&HashMap<u64, BBox>>) -> CocoFile {
    CocoFile {
        images: ds
            .images
            .iter()
            .map(|im| CocoImage {
                id: im.id,
                width: im.shape.width as u32,
                height: im.shape.height as u32,
                file_name: im.file_name.clone(),
            })
            .collect(),
        annotations: ds
            .objects
            .iter()
            .map(|o| {
                let b = boxes.map_or(o.gt_box, |m| m[&o.object_id]);
                CocoAnnotation {
                    id: o.object_id,
                    image_id: o.image_id,
                    category_id: ds.categories[o.category].id,
                    bbox: b.xywh().map(round2),
                    point: o.point.map(|p| [p.x, p.y]),
                    mask: o.mask.as_ref().map(Mask::to_rle),
                }
            })
            .collect(),
        categories: ds
            .categories
            .iter()
            .map(|c| CocoCategory {
                id: c.id,
                name: c.name.clone(),
            })
            .collect(),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn dataset_to_string(ds: &Dataset) -> String {
    serde_json::to_string_pretty(&to_coco(ds, None)).expect("dataset serializes")
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_json(&to_coco(ds, None), path)
}

/// Writes the dataset with every bbox replaced by its pseudo box.
pub fn save_pseudo_boxes(ds: &Dataset, pseudo: &HashMap<u64, BBox>, path: &Path) -> Result<()> {
    let missing: Vec<u64> = ds
        .objects
        .iter()
        .map(|o| o.object_id)
        .filter(|id| !pseudo.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingObjects(missing));
    }
    write_json(&to_coco(ds, Some(pseudo)), path)
}

// Quasi-center points.

/// Rectified Gaussian parameters. `mu` and `sigma` are relative to the box
/// size per axis; `kappa` scales the central ellipse semi-axes, each capped
/// at `axis_cap` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RGParams {
    pub mu: f64,
    pub sigma: f64,
    pub kappa: f64,
    pub axis_cap: f64,
}

impl Default for RGParams {
    fn default() -> Self {
        Self {
            mu: 0.0,
            sigma: 0.25,
            kappa: 0.25,
            axis_cap: 96.0,
        }
    }
}

impl RGParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.kappa > 0.0 && self.kappa <= 0.5 && self.axis_cap > 0.0) {
            return Err(Error::Config(format!("invalid RG params {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = ((x - self.cx) / self.a, (y - self.cy) / self.b);
        u * u + v * v <= 1.0
    }

    /// Vertical chord at `x`, if any.
    fn chord(&self, x: f64) -> Option<(f64, f64)> {
        let u = (x - self.cx) / self.a;
        (u.abs() <= 1.0).then(|| {
            let half = self.b * (1.0 - u * u).max(0.0).sqrt();
            (self.cy - half, self.cy + half)
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Gauss2 {
    mx: f64,
    my: f64,
    sx: f64,
    sy: f64,
}

impl Gauss2 {
    fn pdf(&self, x: f64, y: f64) -> f64 {
        let (u, v) = ((x - self.mx) / self.sx, (y - self.my) / self.sy);
        (-0.5 * (u * u + v * v)).exp() / (2.0 * std::f64::consts::PI * self.sx * self.sy)
    }

    fn pdf_x(&self, x: f64) -> f64 {
        let u = (x - self.mx) / self.sx;
        (-0.5 * u * u).exp() / ((2.0 * std::f64::consts::PI).sqrt() * self.sx)
    }

    fn cdf_x(&self, x: f64) -> f64 {
        normal_cdf((x - self.mx) / self.sx)
    }

    fn cdf_y(&self, y: f64) -> f64 {
        normal_cdf((y - self.my) / self.sy)
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// The support region `V` of the rectified Gaussian for one object.
#[derive(Debug, Clone)]
pub struct Support<'a> {
    gt_box: BBox,
    mask: Option<&'a Mask>,
    ellipse: Ellipse,
    use_ellipse: bool,
    gauss: Gauss2,
}

impl<'a> Support<'a> {
    pub fn new(obj: &'a ObjectRecord, params: &RGParams) -> Self {
        let b = obj.gt_box;
        let ellipse = Ellipse {
            cx: b.cx,
            cy: b.cy,
            a: (params.kappa * b.w).min(params.axis_cap),
            b: (params.kappa * b.h).min(params.axis_cap),
        };
        let gauss = Gauss2 {
            mx: b.cx + params.mu * b.w,
            my: b.cy + params.mu * b.h,
            sx: params.sigma * b.w,
            sy: params.sigma * b.h,
        };
        let mask = obj.mask.as_ref();
        let use_ellipse = match mask {
            // ellipse semi-axes never exceed half the box, so it lies inside it
            None => true,
            Some(m) => mask_meets_ellipse(m, &ellipse),
        };
        Self {
            gt_box: b,
            mask,
            ellipse,
            use_ellipse,
            gauss,
        }
    }

    /// Whether `V` is the mask/ellipse intersection (`true`) or the whole mask.
    pub fn uses_ellipse(&self) -> bool {
        self.use_ellipse
    }

    /// Ellipse semi-axes after the pixel cap.
    pub fn semi_axes(&self) -> (f64, f64) {
        (self.ellipse.a, self.ellipse.b)
    }

    pub fn in_mask(&self, x: f64, y: f64) -> bool {
        match self.mask {
            Some(m) => m.contains(x, y),
            None => {
                let [x1, y1, x2, y2] = self.gt_box.corners();
                (x1..=x2).contains(&x) && (y1..=y2).contains(&y)
            }
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.in_mask(x, y) && (!self.use_ellipse || self.ellipse.contains(x, y))
    }

    /// Corner rectangle bounding `V`.
    pub fn bounding_rect(&self) -> [f64; 4] {
        if self.use_ellipse {
            let e = self.ellipse;
            [e.cx - e.a, e.cy - e.b, e.cx + e.a, e.cy + e.b]
        } else {
            match self.mask {
                Some(m) => m.bounding_rect().unwrap_or(self.gt_box.corners()),
                None => self.gt_box.corners(),
            }
        }
    }

    /// Gaussian probability mass inside `V`.
    ///
    /// Pixel-exact products of normal CDFs where `V` is a union of pixels;
    /// otherwise a 1-D integral over vertical chords, parameterized by angle so
    /// the square-root ends of the ellipse stay smooth.
    pub fn gaussian_mass(&self) -> f64 {
        let g = &self.gauss;
        if !self.use_ellipse {
            return match self.mask {
                None => {
                    let [x1, y1, x2, y2] = self.gt_box.corners();
                    (g.cdf_x(x2) - g.cdf_x(x1)) * (g.cdf_y(y2) - g.cdf_y(y1))
                }
                Some(m) => {
                    let mut total = 0.0;
                    for j in 0..m.height {
                        let y = (m.y0 + j as i64) as f64;
                        let py = g.cdf_y(y + 1.0) - g.cdf_y(y);
                        for i in 0..m.width {
                            if m.get(i, j) {
                                let x = (m.x0 + i as i64) as f64;
                                total += py * (g.cdf_x(x + 1.0) - g.cdf_x(x));
                            }
                        }
                    }
                    total
                }
            };
        }
        let e = self.ellipse;
        let chord_mass = |x: f64| -> f64 {
            let Some((ylo, yhi)) = e.chord(x) else {
                return 0.0;
            };
            match self.mask {
                None => g.cdf_y(yhi) - g.cdf_y(ylo),
                Some(m) => {
                    let i = x.floor() as i64 - m.x0;
                    if i < 0 || i as usize >= m.width {
                        return 0.0;
                    }
                    let mut s = 0.0;
                    for j in 0..m.height {
                        if m.get(i as usize, j) {
                            let y0 = (m.y0 + j as i64) as f64;
                            let (lo, hi) = (y0.max(ylo), (y0 + 1.0).min(yhi));
                            if hi > lo {
                                s += g.cdf_y(hi) - g.cdf_y(lo);
                            }
                        }
                    }
                    s
                }
            }
        };
        // x = cx + a sin(t), t in [-pi/2, pi/2]; composite Simpson
        let n = 8192;
        let (t0, t1) = (-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2);
        let h = (t1 - t0) / n as f64;
        let f = |t: f64| {
            let x = e.cx + e.a * t.sin();
            g.pdf_x(x) * chord_mass(x) * e.a * t.cos()
        };
        let mut acc = f(t0) + f(t1);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(t0 + i as f64 * h);
        }
        acc * h / 3.0
    }
}

fn mask_meets_ellipse(m: &Mask, e: &Ellipse) -> bool {
    if m.contains(e.cx, e.cy) {
        return true;
    }
    (0..m.height).any(|j| {
        (0..m.width).any(|i| {
            m.get(i, j)
                && e.contains(
                    (m.x0 + i as i64) as f64 + 0.5,
                    (m.y0 + j as i64) as f64 + 0.5,
                )
        })
    })
}

/// Rectified Gaussian density of `(x, y)`: zero outside `V`, the Gaussian
/// renormalized over `V` inside it.
pub fn rg_density(x: f64, y: f64, obj: &ObjectRecord, params: &RGParams) -> f64 {
    let support = Support::new(obj, params);
    rg_density_with(&support, support.gaussian_mass(), x, y)
}

/// Density with a precomputed support and normalizer.
pub fn rg_density_with(support: &Support<'_>, mass: f64, x: f64, y: f64) -> f64 {
    if !support.contains(x, y) || mass <= 0.0 {
        return 0.0;
    }
    support.gauss.pdf(x, y) / mass
}

/// Draws one quasi-center point by rejection from the Gaussian restricted to `V`.
pub fn sample_qc_point(obj: &ObjectRecord, params: &RGParams, rng_seed: u64) -> Result<PointAnno> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_qc_point_with(&Support::new(obj, params), obj, &mut rng)
}

fn sample_qc_point_with(
    support: &Support<'_>,
    obj: &ObjectRecord,
    rng: &mut impl Rng,
) -> Result<PointAnno> {
    let g = support.gauss;
    for _ in 0..REJECTION_BUDGET {
        let zx: f64 = rng.sample(StandardNormal);
        let zy: f64 = rng.sample(StandardNormal);
        let (x, y) = (g.mx + g.sx * zx, g.my + g.sy * zy);
        if support.contains(x, y) {
            return Ok(PointAnno {
                x,
                y,
                category: obj.category,
            });
        }
    }
    let centroid = match &obj.mask {
        Some(m) => m.centroid(),
        None => Some((obj.gt_box.cx, obj.gt_box.cy)),
    };
    match centroid {
        Some((x, y)) if support.in_mask(x, y) => Ok(PointAnno {
            x,
            y,
            category: obj.category,
        }),
        _ => Err(Error::SamplingExhausted {
            object_id: obj.object_id,
        }),
    }
}

/// Seed for one object's point, derived from the run seed and its id.
pub fn object_seed(global_seed: u64, object_id: u64) -> u64 {
    seed::derive(&[global_seed, object_id, 0x9C])
}

/// Returns a copy of the dataset with a fresh quasi-center point on every object.
pub fn generate_points(ds: &Dataset, params: &RGParams, global_seed: u64) -> Result<Dataset> {
    params.validate()?;
    let mut out = ds.clone();
    for obj in &mut out.objects {
        obj.point = Some(sample_qc_point(
            obj,
            params,
            object_seed(global_seed, obj.object_id),
        )?);
    }
    Ok(out)
}

/// Draws `n` points for one object from a single stream.
pub fn sample_qc_points(
    obj: &ObjectRecord,
    params: &RGParams,
    n: usize,
    rng_seed: u64,
) -> Result<Vec<PointAnno>> {
    let support = Support::new(obj, params);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    (0..n)
        .map(|_| sample_qc_point_with(&support, obj, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn object(b: BBox) -> ObjectRecord {
        ObjectRecord {
            object_id: 1,
            image_id: 1,
            category: 0,
            gt_box: b,
            mask: None,
            point: None,
        }
    }

    const MINIMAL: &str = r#"{
        "images": [{"id": 1, "width": 64, "height": 48, "file_name": "a.png"}],
        "annotations": [{"id": 5, "image_id": 1, "category_id": 3, "bbox": [10, 10, 20, 30]}],
        "categories": [{"id": 3, "name": "thing"}]
    }"#;

    #[test]
    fn loads_minimal_file() {
        let ds = parse_dataset(MINIMAL).unwrap();
        assert_eq!(ds.objects.len(), 1);
        assert_eq!(ds.num_categories(), 1);
        assert_eq!(
            ds.objects[0].gt_box,
            BBox::new(20.0, 25.0, 20.0, 30.0).unwrap()
        );
        assert_eq!(ds.objects[0].category, 0);
    }

    #[test]
    fn dangling_image_is_referential_error() {
        let text = MINIMAL.replace("\"image_id\": 1", "\"image_id\": 99");
        assert!(matches!(
            parse_dataset(&text),
            Err(Error::DanglingImage { image_id: 99, .. })
        ));
    }

    #[test]
    fn schema_errors_name_the_record() {
        let text = MINIMAL.replace("\"category_id\": 3", "\"category_id\": 4");
        let err = parse_dataset(&text).unwrap_err().to_string();
        assert!(err.contains("annotation 5"), "{err}");
        let text = MINIMAL.replace("[10, 10, 20, 30]", "[10, 10, 0, 30]");
        assert!(parse_dataset(&text)
            .unwrap_err()
            .to_string()
            .contains("annotation 5"));
        let text = MINIMAL.replace("[10, 10, 20, 30]", "[50, 10, 20, 30]");
        assert!(parse_dataset(&text).is_err());
    }

    #[test]
    fn pseudo_boxes_serialize_in_corner_form() {
        let ds = parse_dataset(MINIMAL).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pseudo.json");
        let pseudo = HashMap::from([(5, BBox::new(20.0, 25.0, 20.0, 30.0).unwrap())]);
        save_pseudo_boxes(&ds, &pseudo, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(
            v["annotations"][0]["bbox"],
            serde_json::json!([10.0, 10.0, 20.0, 30.0])
        );
        let err = save_pseudo_boxes(&ds, &HashMap::new(), &path).unwrap_err();
        assert!(matches!(err, Error::MissingObjects(ref ids) if ids == &[5]));
    }

    #[test]
    fn identity_pseudo_map_reproduces_input_boxes() {
        let ds = parse_dataset(MINIMAL).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
        save_dataset(&ds, &a).unwrap();
        save_pseudo_boxes(&ds, &ds.gt_boxes(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(load_dataset(&b).unwrap(), ds);
    }

    #[test]
    fn mask_rle_round_trip_and_bounds() {
        let mut m = Mask::from_box(&BBox::from_corners([2.0, 3.0, 8.0, 7.0]).unwrap());
        m.bits[0] = false;
        let back = Mask::from_rle(&m.to_rle()).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.bounding_rect(), Some([2.0, 3.0, 8.0, 7.0]));
        assert!(!m.contains(2.5, 3.5));
        assert!(m.contains(3.5, 3.5));
    }

    #[test]
    fn points_stay_in_central_ellipse() {
        let obj = object(BBox::new(50.0, 50.0, 40.0, 40.0).unwrap());
        let params = RGParams::default();
        for p in sample_qc_points(&obj, &params, 2000, 3).unwrap() {
            let (u, v) = ((p.x - 50.0) / 10.0, (p.y - 50.0) / 10.0);
            assert!(u * u + v * v <= 1.0);
        }
    }

    #[test]
    fn large_boxes_hit_the_axis_cap() {
        let obj = object(BBox::new(600.0, 600.0, 1000.0, 1000.0).unwrap());
        let support = Support::new(&obj, &RGParams::default());
        assert_eq!(support.semi_axes(), (96.0, 96.0));
        for p in sample_qc_points(&obj, &RGParams::default(), 2000, 11).unwrap() {
            let (u, v) = ((p.x - 600.0) / 96.0, (p.y - 600.0) / 96.0);
            assert!(u * u + v * v <= 1.0);
        }
    }

    #[test]
    fn density_zero_outside_and_peaks_at_center() {
        let obj = object(BBox::new(20.0, 20.0, 40.0, 40.0).unwrap());
        let params = RGParams::default();
        assert_eq!(rg_density(2.0, 2.0, &obj, &params), 0.0);
        // just past the ellipse edge but inside the box
        assert_eq!(rg_density(20.0, 30.5, &obj, &params), 0.0);
        let center = rg_density(20.0, 20.0, &obj, &params);
        for (x, y) in [(21.0, 20.0), (18.0, 23.0), (25.0, 27.0)] {
            assert!(rg_density(x, y, &obj, &params) < center);
        }
    }

    #[test]
    fn uncapped_mass_matches_closed_form() {
        // kappa / sigma = 1 gives a standardized disk of radius 1
        let obj = object(BBox::new(50.0, 40.0, 40.0, 24.0).unwrap());
        let support = Support::new(&obj, &RGParams::default());
        let expected = 1.0 - (-0.5f64).exp();
        assert!((support.gaussian_mass() - expected).abs() < 1e-7);
    }

    #[test]
    fn disjoint_mask_falls_back_to_whole_mask() {
        let b = BBox::from_corners([0.0, 0.0, 20.0, 20.0]).unwrap();
        let mut mask = Mask::from_box(&b);
        for j in 0..20 {
            for i in 0..20 {
                mask.bits[j * 20 + i] = i < 3 || j < 3;
            }
        }
        let obj = ObjectRecord {
            mask: Some(mask),
            ..object(b)
        };
        let support = Support::new(&obj, &RGParams::default());
        assert!(!support.uses_ellipse());
        for p in sample_qc_points(&obj, &RGParams::default(), 500, 5).unwrap() {
            assert!(obj.mask.as_ref().unwrap().contains(p.x, p.y));
        }
    }

    #[test]
    fn point_generation_is_deterministic() {
        let ds = parse_dataset(MINIMAL).unwrap();
        let a = generate_points(&ds, &RGParams::default(), 7).unwrap();
        let b = generate_points(&ds, &RGParams::default(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_points(&ds, &RGParams::default(), 8).unwrap();
        assert_ne!(a, c);
    }
}
