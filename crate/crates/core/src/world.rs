//! A deterministic stand-in for a pretrained segmentation network.
//!
//! Scenes are road-like layouts (sky above a horizon, a building band, a road
//! at the bottom, vehicles on the road) rendered with per-shape color jitter
//! and per-pixel noise. Evaluation scenes additionally drop objects of unseen
//! shape and color onto the road. The frozen encoder is a fixed random
//! projection of each pixel's 3x3 RGB neighborhood and normalized
//! coordinates; the frozen decoder is a ridge regression from those features
//! to scaled one-hot class targets.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::head::read_manifest;
use crate::io::{encode_tensor, read_pgm, read_ppm, read_tensor, write_pgm, write_ppm, write_tensor, Dtype};
use crate::linalg::gemm;
use crate::rng::{self, Rng};
use crate::tensor::{ImageRgb, LabelMap, Tensor, IGNORE};

/// Encoder input width: 3x3 neighborhood times RGB, plus (x, y).
pub const ENCODER_INPUTS: usize = 3 * 3 * 3 + 2;

const SKY: u8 = 0;
const BUILDING: u8 = 1;
const ROAD: u8 = 2;
const VEHICLE: u8 = 3;
const VEGETATION: u8 = 4;
const SIGN: u8 = 5;
pub const MAX_CLASSES: usize = 6;

const CLASS_COLORS: [[f64; 3]; MAX_CLASSES] = [
    [105.0, 155.0, 225.0],
    [150.0, 115.0, 85.0],
    [75.0, 75.0, 80.0],
    [200.0, 35.0, 45.0],
    [60.0, 130.0, 55.0],
    [235.0, 235.0, 235.0],
];

/// Minimum RGB distance between an anomaly color family and any class color.
pub const MIN_ANOMALY_COLOR_DISTANCE: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub anomalies_min: usize,
    pub anomalies_max: usize,
    /// Per-channel amplitude of uniform pixel noise.
    pub noise: f64,
    /// Per-channel amplitude of per-shape color jitter.
    pub jitter: f64,
    /// Base colors of the anomaly families, used only in eval scenes.
    pub anomaly_colors: Vec<[u8; 3]>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 4,
            shapes_min: 3,
            shapes_max: 6,
            anomalies_min: 1,
            anomalies_max: 3,
            noise: 12.0,
            jitter: 15.0,
            anomaly_colors: vec![[152, 95, 135], [127, 135, 155], [200, 60, 205]],
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes must be in 2..={MAX_CLASSES}")));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config("scenes must be at least 16x16".into()));
        }
        if self.shapes_min > self.shapes_max || self.anomalies_min > self.anomalies_max {
            return Err(Error::Config("min counts exceed max counts".into()));
        }
        if self.anomaly_colors.is_empty() {
            return Err(Error::Config("at least one anomaly color is required".into()));
        }
        for a in &self.anomaly_colors {
            for c in &CLASS_COLORS[..self.num_classes] {
                let d2: f64 = (0..3).map(|i| (a[i] as f64 - c[i]).powi(2)).sum();
                if d2.sqrt() < MIN_ANOMALY_COLOR_DISTANCE {
                    return Err(Error::Config(format!("anomaly color {a:?} is too close to class color {c:?}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    /// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Triangle([[f64; 2]; 3]),
}

impl Geometry {
    /// Membership of a pixel center.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Geometry::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
            Geometry::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((px - cx) / rx, (py - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
            Geometry::Triangle([a, b, c]) => {
                let side = |p: [f64; 2], q: [f64; 2]| (q[0] - p[0]) * (py - p[1]) - (q[1] - p[1]) * (px - p[0]);
                let (s1, s2, s3) = (side(a, b), side(b, c), side(c, a));
                (s1 >= 0.0 && s2 >= 0.0 && s3 >= 0.0) || (s1 <= 0.0 && s2 <= 0.0 && s3 <= 0.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Class(u8),
    Anomaly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeRecord {
    pub kind: ShapeKind,
    pub geometry: Geometry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImageRgb,
    pub labels: LabelMap,
    pub anomaly_mask: Vec<bool>,
    /// Row where the building band starts.
    pub horizon: usize,
    /// Row where the road starts.
    pub road_top: usize,
    /// Shapes in paint order.
    pub shapes: Vec<ShapeRecord>,
}

impl Scene {
    /// Ground truth for evaluation: 1 anomaly, 0 normal.
    pub fn anomaly_map(&self) -> LabelMap {
        let v = self.anomaly_mask.iter().map(|&a| a as u8).collect();
        LabelMap::new(self.image.height(), self.image.width(), v).expect("scene shape")
    }
}

fn band_class(y: usize, horizon: usize, road_top: usize, k: usize) -> u8 {
    if y < horizon {
        SKY
    } else if k == 2 || y >= road_top {
        if k == 2 { 1 } else { ROAD }
    } else {
        BUILDING
    }
}

fn jittered(base: [f64; 3], amp: f64, rng: &mut Rng) -> [f64; 3] {
    base.map(|c| c + rng.random_range(-amp..=amp))
}

fn sample_shape(class: u8, spec: &SceneSpec, horizon: usize, road_top: usize, rng: &mut Rng) -> Geometry {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let (hz, rt) = (horizon as f64, road_top as f64);
    match class {
        BUILDING => {
            let bw = rng.random_range(0.08 * w..0.25 * w);
            let x0 = rng.random_range(0.0..w - bw);
            let top = rng.random_range(0.12 * h..hz.max(0.12 * h + 1.0));
            Geometry::Rect { x0, y0: top, x1: x0 + bw, y1: rt }
        }
        VEHICLE => {
            let vw = rng.random_range(0.12 * w..0.28 * w);
            let vh = rng.random_range(0.07 * h..0.14 * h);
            let x0 = rng.random_range(0.0..w - vw);
            let y0 = rng.random_range(rt..(h - vh).max(rt + 1.0));
            Geometry::Rect { x0, y0, x1: x0 + vw, y1: y0 + vh }
        }
        VEGETATION => {
            let rx = rng.random_range(0.05 * w..0.1 * w);
            let ry = rng.random_range(0.05 * h..0.1 * h);
            let cx = rng.random_range(0.0..w);
            let cy = rng.random_range(hz..rt.max(hz + 1.0));
            Geometry::Ellipse { cx, cy, rx, ry }
        }
        _ => {
            let x0 = rng.random_range(0.0..w - 3.0);
            let y0 = rng.random_range(0.2 * h..hz.max(0.2 * h + 1.0));
            Geometry::Rect { x0, y0, x1: x0 + 2.0, y1: rt }
        }
    }
}

fn sample_anomaly(spec: &SceneSpec, road_top: usize, rng: &mut Rng) -> Geometry {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let rt = road_top as f64;
    let size = rng.random_range(0.06..0.12) * h.min(w);
    let cx = rng.random_range(size..w - size);
    let cy = rng.random_range((rt + 0.5 * size).min(h - size)..h - size);
    if rng.random_bool(0.5) {
        Geometry::Ellipse { cx, cy, rx: size, ry: size }
    } else {
        let s = 1.2 * size;
        Geometry::Triangle([[cx, cy - s], [cx + s, cy + 0.8 * s], [cx - s, cy + 0.8 * s]])
    }
}

/// Generates one scene. Anomalies are only placed when `with_anomalies`.
pub fn generate_scene(spec: &SceneSpec, with_anomalies: bool, rng: &mut Rng) -> Result<Scene> {
    spec.validate()?;
    let (h, w, k) = (spec.height, spec.width, spec.num_classes);
    let horizon = rng.random_range((0.3 * h as f64) as u32..=(0.45 * h as f64) as u32) as usize;
    let road_top = rng.random_range((0.55 * h as f64) as u32..=(0.7 * h as f64) as u32) as usize;

    let shape_classes: Vec<u8> = [BUILDING, VEHICLE, VEGETATION, SIGN]
        .into_iter()
        .filter(|&c| (c as usize) < k && k > 2)
        .collect();
    let mut shapes = Vec::new();
    if !shape_classes.is_empty() {
        let n = rng.random_range(spec.shapes_min as u32..=spec.shapes_max as u32) as usize;
        for i in 0..n {
            // the first shape is a vehicle whenever vehicles exist
            let class = if i == 0 && shape_classes.contains(&VEHICLE) {
                VEHICLE
            } else {
                shape_classes[rng.random_range(0..shape_classes.len() as u32) as usize]
            };
            shapes.push(ShapeRecord {
                kind: ShapeKind::Class(class),
                geometry: sample_shape(class, spec, horizon, road_top, rng),
            });
        }
        // buildings first so vehicles and signs stay visible
        shapes.sort_by_key(|s| match s.kind {
            ShapeKind::Class(BUILDING) => 0,
            _ => 1,
        });
    }
    if with_anomalies {
        let n = rng.random_range(spec.anomalies_min as u32..=spec.anomalies_max as u32) as usize;
        for _ in 0..n {
            shapes.push(ShapeRecord {
                kind: ShapeKind::Anomaly,
                geometry: sample_anomaly(spec, road_top, rng),
            });
        }
    }

    let band_colors: Vec<[f64; 3]> = (0..k).map(|c| jittered(CLASS_COLORS[c], spec.jitter, rng)).collect();
    let shape_colors: Vec<[f64; 3]> = shapes
        .iter()
        .map(|s| match s.kind {
            ShapeKind::Class(c) => jittered(CLASS_COLORS[c as usize], spec.jitter, rng),
            ShapeKind::Anomaly => {
                let base = spec.anomaly_colors[rng.random_range(0..spec.anomaly_colors.len() as u32) as usize];
                jittered(base.map(f64::from), spec.jitter, rng)
            }
        })
        .collect();

    let mut pixels = Vec::with_capacity(h * w);
    let mut labels = Vec::with_capacity(h * w);
    let mut anomaly_mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let band = band_class(y, horizon, road_top, k);
            let mut label = band;
            let mut color = band_colors[band as usize];
            let mut anomalous = false;
            for (s, c) in shapes.iter().zip(&shape_colors) {
                if s.geometry.contains(px, py) {
                    color = *c;
                    match s.kind {
                        ShapeKind::Class(cls) => {
                            label = cls;
                            anomalous = false;
                        }
                        ShapeKind::Anomaly => {
                            label = IGNORE;
                            anomalous = true;
                        }
                    }
                }
            }
            let noisy = color.map(|v| (v + rng.random_range(-spec.noise..=spec.noise)).round().clamp(0.0, 255.0) as u8);
            pixels.push(noisy);
            labels.push(label);
            anomaly_mask.push(anomalous);
        }
    }
    Ok(Scene {
        image: ImageRgb::new(h, w, pixels)?,
        labels: LabelMap::new(h, w, labels)?,
        anomaly_mask,
        horizon,
        road_top,
        shapes,
    })
}

/// Frozen encoder and decoder. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModel {
    /// `[D, ENCODER_INPUTS]`
    projection: Tensor,
    /// `[K, D]`
    decoder_weight: Tensor,
    decoder_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrozenConfig {
    pub feature_dim: usize,
    pub n_scenes: usize,
    pub ridge: f64,
    /// Height of the one-hot regression targets; sets logit confidence.
    pub logit_scale: f64,
    pub seed: u64,
}

impl Default for FrozenConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            n_scenes: 100,
            ridge: 1e-2,
            logit_scale: 10.0,
            seed: 7,
        }
    }
}

impl FrozenModel {
    pub fn from_parts(projection: Tensor, decoder_weight: Tensor, decoder_bias: Tensor) -> Result<Self> {
        let d = projection.shape()[0];
        if projection.shape() != [d, ENCODER_INPUTS]
            || decoder_weight.rank() != 2
            || decoder_weight.shape()[1] != d
            || decoder_bias.shape() != [decoder_weight.shape()[0]]
        {
            return Err(Error::Shape(format!(
                "frozen parts {:?} {:?} {:?}",
                projection.shape(),
                decoder_weight.shape(),
                decoder_bias.shape()
            )));
        }
        Ok(Self {
            projection,
            decoder_weight,
            decoder_bias,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.decoder_weight.shape()[0]
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn decoder_weight(&self) -> &Tensor {
        &self.decoder_weight
    }

    pub fn decoder_bias(&self) -> &Tensor {
        &self.decoder_bias
    }

    /// Hex SHA-256 over the TNSR encodings of all parameters.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for t in [&self.projection, &self.decoder_weight, &self.decoder_bias] {
            hasher.update(encode_tensor(t, Dtype::F64).expect("rank <= 4"));
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Features `[D, H, W]`.
    pub fn encode(&self, image: &ImageRgb) -> Tensor {
        let inputs = encoder_inputs(image);
        let p = image.height() * image.width();
        let d = self.feature_dim();
        let mut out = vec![0.0; d * p];
        gemm(d, ENCODER_INPUTS, p, self.projection.data(), &inputs, 0.0, &mut out);
        Tensor::new(vec![d, image.height(), image.width()], out).expect("feature shape")
    }

    /// Segmentation logits with the same trailing layout as `features`.
    pub fn decode(&self, features: &Tensor) -> Result<Tensor> {
        let d = self.feature_dim();
        if features.shape()[0] != d {
            return Err(Error::Shape(format!(
                "features {:?} for a {d}-dim decoder",
                features.shape()
            )));
        }
        let p = features.len() / d;
        let k = self.num_classes();
        let mut out = vec![0.0; k * p];
        for (c, row) in out.chunks_mut(p).enumerate() {
            row.fill(self.decoder_bias.data()[c]);
        }
        gemm(k, d, p, self.decoder_weight.data(), features.data(), 1.0, &mut out);
        let mut shape = features.shape().to_vec();
        shape[0] = k;
        Tensor::new(shape, out)
    }

    /// Random projection from `seed`, decoder fitted by ridge regression on
    /// `cfg.n_scenes` in-distribution scenes.
    pub fn fit(spec: &SceneSpec, cfg: &FrozenConfig) -> Result<Self> {
        spec.validate()?;
        if cfg.feature_dim == 0 || cfg.n_scenes == 0 || cfg.ridge < 0.0 {
            return Err(Error::Config("frozen model needs feature_dim, n_scenes >= 1 and ridge >= 0".into()));
        }
        let d = cfg.feature_dim;
        let k = spec.num_classes;
        let mut prng = rng::stream(cfg.seed, 0, 0);
        let scale = 1.0 / (ENCODER_INPUTS as f64).sqrt();
        let proj: Vec<f64> = (0..d * ENCODER_INPUTS)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut prng))
            .collect();
        let projection = Tensor::new(vec![d, ENCODER_INPUTS], proj)?;
        let mut model = FrozenModel {
            projection,
            decoder_weight: Tensor::zeros(vec![k, d]),
            decoder_bias: Tensor::zeros(vec![k]),
        };

        // normal equations over rows [features, 1]
        let m = d + 1;
        let mut gram = DMatrix::<f64>::zeros(m, m);
        let mut rhs = DMatrix::<f64>::zeros(m, k);
        for i in 0..cfg.n_scenes {
            let scene = generate_scene(spec, false, &mut rng::stream(cfg.seed, i as u64, 1))?;
            let feats = model.encode(&scene.image);
            let p = scene.labels.labels().len();
            let f = feats.data();
            let mut row = vec![0.0; m];
            for (px, &label) in scene.labels.labels().iter().enumerate() {
                if label == IGNORE {
                    continue;
                }
                for j in 0..d {
                    row[j] = f[j * p + px];
                }
                row[d] = 1.0;
                for a in 0..m {
                    let ra = row[a];
                    for b in a..m {
                        gram[(a, b)] += ra * row[b];
                    }
                    rhs[(a, label as usize)] += ra * cfg.logit_scale;
                }
            }
        }
        for a in 0..m {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        for j in 0..d {
            gram[(j, j)] += cfg.ridge;
        }
        let solution = match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => gram
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::InvalidInput("singular normal equations".into()))?,
        };
        let mut weight = vec![0.0; k * d];
        let mut bias = vec![0.0; k];
        for c in 0..k {
            for j in 0..d {
                weight[c * d + j] = solution[(j, c)];
            }
            bias[c] = solution[(d, c)];
        }
        model.decoder_weight = Tensor::new(vec![k, d], weight)?;
        model.decoder_bias = Tensor::new(vec![k], bias)?;
        Ok(model)
    }

    /// Fraction of labeled pixels whose argmax logit matches the label.
    pub fn pixel_accuracy(&self, scenes: &[Scene]) -> f64 {
        let (mut hit, mut total) = (0usize, 0usize);
        for s in scenes {
            let logits = self.decode(&self.encode(&s.image)).expect("own features");
            let p = s.labels.labels().len();
            let k = self.num_classes();
            for (px, &label) in s.labels.labels().iter().enumerate() {
                if label == IGNORE {
                    continue;
                }
                let best = (0..k)
                    .max_by(|&a, &b| logits.data()[a * p + px].total_cmp(&logits.data()[b * p + px]))
                    .unwrap();
                hit += (best == label as usize) as usize;
                total += 1;
            }
        }
        hit as f64 / total.max(1) as f64
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_tensor(dir.join("projection.tnsr"), &self.projection)?;
        write_tensor(dir.join("decoder_weight.tnsr"), &self.decoder_weight)?;
        write_tensor(dir.join("decoder_bias.tnsr"), &self.decoder_bias)?;
        let path = dir.join("digest.txt");
        fs::write(&path, format!("{}\n", self.digest())).map_err(|e| Error::io(&path, e))
    }

    /// Loads and verifies the stored digest.
    pub fn load(dir: &Path) -> Result<Self> {
        let model = Self::from_parts(
            read_tensor(dir.join("projection.tnsr"))?,
            read_tensor(dir.join("decoder_weight.tnsr"))?,
            read_tensor(dir.join("decoder_bias.tnsr"))?,
        )?;
        let path = dir.join("digest.txt");
        let stored = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if stored.trim() != model.digest() {
            return Err(Error::Checkpoint("frozen model digest mismatch".into()));
        }
        Ok(model)
    }
}

/// Encoder inputs `[ENCODER_INPUTS, H * W]`: edge-replicated 3x3 RGB
/// neighborhood scaled to `[0, 1]`, then `x / W` and `y / H`.
pub fn encoder_inputs(image: &ImageRgb) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let p = h * w;
    let mut out = vec![0.0; ENCODER_INPUTS * p];
    for y in 0..h {
        for x in 0..w {
            let px = y * w + x;
            let mut j = 0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let rgb = image.get(sy, sx);
                    for c in rgb {
                        out[j * p + px] = c as f64 / 255.0;
                        j += 1;
                    }
                }
            }
            out[j * p + px] = x as f64 / w as f64;
            out[(j + 1) * p + px] = y as f64 / h as f64;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub image: ImageRgb,
    pub labels: LabelMap,
    /// 1 anomaly, 0 normal, [`IGNORE`] excluded.
    pub anomaly: LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<ImageRgb>,
    pub train_labels: Vec<LabelMap>,
    pub eval: Vec<EvalSample>,
}

impl Dataset {
    /// Train scenes from lane 2, eval scenes from lane 3 of `spec.seed`.
    pub fn generate(spec: &SceneSpec, n_train: usize, n_eval: usize) -> Result<Self> {
        let mut train = Vec::with_capacity(n_train);
        let mut train_labels = Vec::with_capacity(n_train);
        for i in 0..n_train {
            let s = generate_scene(spec, false, &mut rng::stream(spec.seed, i as u64, 2))?;
            train.push(s.image);
            train_labels.push(s.labels);
        }
        let eval = (0..n_eval)
            .map(|i| {
                let s = generate_scene(spec, true, &mut rng::stream(spec.seed, i as u64, 3))?;
                let anomaly = s.anomaly_map();
                Ok(EvalSample {
                    image: s.image,
                    labels: s.labels,
                    anomaly,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            train,
            train_labels,
            eval,
        })
    }

    /// `manifest.txt`, `train/NNNN.ppm` + `_labels.pgm`, `eval/NNNN.ppm` +
    /// `_labels.pgm` + `_anomaly.pgm`.
    pub fn save(&self, dir: &Path, extra: &[(&str, String)]) -> Result<()> {
        for sub in ["train", "eval"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for (i, (img, lab)) in self.train.iter().zip(&self.train_labels).enumerate() {
            write_ppm(dir.join(format!("train/{i:04}.ppm")), img)?;
            write_pgm(dir.join(format!("train/{i:04}_labels.pgm")), lab)?;
        }
        for (i, s) in self.eval.iter().enumerate() {
            write_ppm(dir.join(format!("eval/{i:04}.ppm")), &s.image)?;
            write_pgm(dir.join(format!("eval/{i:04}_labels.pgm")), &s.labels)?;
            write_pgm(dir.join(format!("eval/{i:04}_anomaly.pgm")), &s.anomaly)?;
        }
        let mut manifest = format!("n_train = {}\nn_eval = {}\n", self.train.len(), self.eval.len());
        for (k, v) in extra {
            manifest.push_str(&format!("{k} = {v}\n"));
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(&dir.join("manifest.txt"))?;
        let count = |k: &str| -> Result<usize> {
            manifest
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("dataset manifest lacks {k}")))
        };
        let (n_train, n_eval) = (count("n_train")?, count("n_eval")?);
        let mut train = Vec::with_capacity(n_train);
        let mut train_labels = Vec::with_capacity(n_train);
        for i in 0..n_train {
            train.push(read_ppm(dir.join(format!("train/{i:04}.ppm")))?);
            train_labels.push(read_pgm(dir.join(format!("train/{i:04}_labels.pgm")))?);
        }
        let eval = (0..n_eval)
            .map(|i| {
                Ok(EvalSample {
                    image: read_ppm(dir.join(format!("eval/{i:04}.ppm")))?,
                    labels: read_pgm(dir.join(format!("eval/{i:04}_labels.pgm")))?,
                    anomaly: read_pgm(dir.join(format!("eval/{i:04}_anomaly.pgm")))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            train,
            train_labels,
            eval,
        })
    }
}
