//! Samples, labeled/unlabeled splits, the synthetic lesion generator, the
//! image-directory loader, augmentation and minibatch assembly.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::transform::TransformOp;

pub const IMAGE_CHANNELS: usize = 3;
pub const MIN_SYNTH_SIZE: usize = 16;

/// One image, optionally with its binary lesion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Grid<f64>,
    pub mask: Option<Grid<u8>>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Grid<f64>, mask: Option<Grid<u8>>) -> Result<Self> {
        let id = id.into();
        if image.channels() != IMAGE_CHANNELS || !image.is_square() {
            return Err(Error::Shape(format!(
                "{id}: image must be square with {IMAGE_CHANNELS} channels, got {}x{}x{}",
                image.channels(),
                image.height(),
                image.width()
            )));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter(format!("{id}: image values outside [0,1]")));
        }
        if let Some(m) = &mask {
            if m.channels() != 1 || m.height() != image.height() || m.width() != image.width() {
                return Err(Error::Shape(format!("{id}: mask extent differs from image")));
            }
            if m.data().iter().any(|&v| v > 1) {
                return Err(Error::Parameter(format!("{id}: mask values must be 0 or 1")));
            }
        }
        Ok(Self { id, image, mask })
    }

    pub fn size(&self) -> usize {
        self.image.width()
    }

    pub fn is_labeled(&self) -> bool {
        self.mask.is_some()
    }

    pub fn without_mask(&self) -> Sample {
        Sample {
            id: self.id.clone(),
            image: self.image.clone(),
            mask: None,
        }
    }
}

/// The labeled set (with masks) and the unlabeled set (masks stripped).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
}

impl DatasetSplit {
    pub fn new(labeled: Vec<Sample>, unlabeled: Vec<Sample>) -> Result<Self> {
        if labeled.iter().any(|s| s.mask.is_none()) {
            return Err(Error::Parameter("labeled sample without mask".into()));
        }
        let unlabeled = unlabeled.iter().map(Sample::without_mask).collect();
        let split = Self { labeled, unlabeled };
        let mut seen = HashSet::new();
        for s in split.iter() {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Parameter(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(split)
    }

    /// Labeled-only split, as used by the supervised baselines.
    pub fn labeled_only(&self) -> DatasetSplit {
        DatasetSplit {
            labeled: self.labeled.clone(),
            unlabeled: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.labeled.iter().chain(self.unlabeled.iter())
    }
}

/// A minibatch with one sampled transformation per member.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images: Vec<Grid<f64>>,
    pub masks: Vec<Option<Grid<u8>>>,
    pub labeled_flags: Vec<bool>,
    pub ops: Vec<TransformOp>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled_flags.iter().filter(|&&f| f).count()
    }
}

fn normal(mean: f64, std: f64) -> Normal<f64> {
    Normal::new(mean, std).expect("finite normal parameters")
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Generates a synthetic lesion image of `size x size` pixels.
///
/// The lesion is an irregular ellipse (harmonic boundary noise) that is either
/// darker or brighter than the surrounding skin. Hair-like dark arcs are added
/// with probability `artifact_level` per arc slot. Pixel values are quantized
/// to multiples of 1/255 so PNG export round-trips exactly.
pub fn generate_lesion_sample<R: Rng + ?Sized>(
    rng: &mut R,
    size: usize,
    artifact_level: f64,
) -> Result<Sample> {
    if size < MIN_SYNTH_SIZE {
        return Err(Error::Parameter(format!(
            "synthetic size must be at least {MIN_SYNTH_SIZE}, got {size}"
        )));
    }
    if !(0.0..=1.0).contains(&artifact_level) {
        return Err(Error::Parameter(format!(
            "artifact level {artifact_level} outside [0,1]"
        )));
    }
    let n = size as f64;

    let skin = [
        rng.random_range(0.55..0.9),
        rng.random_range(0.35..0.7),
        rng.random_range(0.25..0.6),
    ];
    let dark_lesion = rng.random_bool(0.75);
    let contrast = rng.random_range(0.12..0.4);
    let lesion_tint = [
        rng.random_range(0.7..1.0),
        rng.random_range(0.8..1.1),
        rng.random_range(0.9..1.2),
    ];
    let grad_dir = rng.random_range(0.0..2.0 * PI);
    let grad_amp = rng.random_range(0.0..0.15);

    let cx = n / 2.0 + rng.random_range(-n / 8.0..n / 8.0);
    let cy = n / 2.0 + rng.random_range(-n / 8.0..n / 8.0);
    let ra = rng.random_range(0.12..0.3) * n;
    let rb = rng.random_range(0.12..0.3) * n;
    let theta = rng.random_range(0.0..PI);
    let harmonics: Vec<(f64, f64, f64)> = (2..=5)
        .map(|k| {
            (
                k as f64,
                rng.random_range(0.0..0.12) / (k as f64 - 1.0).sqrt(),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();

    // Normalized radial coordinate; the lesion is the set where it is <= 1.
    let radial = |x: f64, y: f64| -> f64 {
        let dx = x - cx;
        let dy = y - cy;
        let u = dx * theta.cos() + dy * theta.sin();
        let v = -dx * theta.sin() + dy * theta.cos();
        let rho = ((u / ra).powi(2) + (v / rb).powi(2)).sqrt();
        let phi = v.atan2(u);
        let boundary = 1.0
            + harmonics
                .iter()
                .map(|&(k, a, p)| a * (k * phi + p).cos())
                .sum::<f64>();
        rho / boundary
    };

    let noise = normal(0.0, rng.random_range(0.02..0.07));
    let mut mask = Grid::filled(1, size, size, 0u8);
    let mut image = Grid::filled(IMAGE_CHANNELS, size, size, 0.0f64);
    let mean_radius = 0.5 * (ra + rb);
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let q = radial(x, y);
            let inside = q <= 1.0;
            if inside {
                mask.set(0, r, c, 1);
            }
            // soft edge about 1.5 px wide around the boundary
            let edge = ((1.0 - q) * mean_radius / 1.5).clamp(-1.0, 1.0);
            let weight = 0.5 + 0.5 * edge;
            let shade = 1.0
                + grad_amp * ((x / n - 0.5) * grad_dir.cos() + (y / n - 0.5) * grad_dir.sin());
            let core = 1.0 - 0.35 * (1.0 - q.min(1.0));
            for ch in 0..IMAGE_CHANNELS {
                let bg = skin[ch] * shade;
                let delta = contrast * lesion_tint[ch] * core;
                let fg = if dark_lesion { bg - delta } else { bg + delta };
                let v = bg * (1.0 - weight) + fg * weight + noise.sample(rng);
                image.set(ch, r, c, v);
            }
        }
    }

    // hair arcs
    for _ in 0..6 {
        if !rng.random_bool(artifact_level) {
            continue;
        }
        let acx = rng.random_range(-0.5..1.5) * n;
        let acy = rng.random_range(-0.5..1.5) * n;
        let arad = rng.random_range(0.3..1.2) * n;
        let start = rng.random_range(0.0..2.0 * PI);
        let sweep = rng.random_range(0.3..1.2);
        let darkness = rng.random_range(0.15..0.35);
        let steps = (arad * sweep * 3.0).ceil() as usize;
        for s in 0..=steps {
            let a = start + sweep * s as f64 / steps as f64;
            let x = acx + arad * a.cos();
            let y = acy + arad * a.sin();
            if x < 0.0 || y < 0.0 {
                continue;
            }
            let (c, r) = (x as usize, y as usize);
            if r >= size || c >= size {
                continue;
            }
            for ch in 0..IMAGE_CHANNELS {
                image.set(ch, r, c, darkness * skin[ch]);
            }
        }
    }

    let image = image.map(quantize);
    Sample::new("synth", image, Some(mask))
}

/// `n` independent synthetic samples with ids `synth-0000`, `synth-0001`, ...
pub fn generate_dataset<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    size: usize,
    artifact_level: f64,
) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Parameter("dataset size must be at least 1".into()));
    }
    (0..n)
        .map(|i| {
            let mut s = generate_lesion_sample(rng, size, artifact_level)?;
            s.id = format!("synth-{i:04}");
            Ok(s)
        })
        .collect()
}

/// Randomly keeps `m_labeled` masks and strips the rest.
pub fn split<R: Rng + ?Sized>(
    dataset: &[Sample],
    m_labeled: usize,
    rng: &mut R,
) -> Result<DatasetSplit> {
    if m_labeled == 0 || m_labeled > dataset.len() {
        return Err(Error::Parameter(format!(
            "labeled budget {m_labeled} outside 1..={}",
            dataset.len()
        )));
    }
    if let Some(s) = dataset.iter().find(|s| s.mask.is_none()) {
        return Err(Error::Parameter(format!("{} has no mask to keep", s.id)));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let labeled = order[..m_labeled]
        .iter()
        .map(|&i| dataset[i].clone())
        .collect();
    let unlabeled = order[m_labeled..]
        .iter()
        .map(|&i| dataset[i].without_mask())
        .collect();
    DatasetSplit::new(labeled, unlabeled)
}

/// Bilinear resampling of every channel to `out x out` (pixel-center aligned).
pub fn resize_bilinear(grid: &Grid<f64>, out: usize) -> Grid<f64> {
    let (h, w) = (grid.height(), grid.width());
    let sy = h as f64 / out as f64;
    let sx = w as f64 / out as f64;
    let mut data = Vec::with_capacity(grid.channels() * out * out);
    for ch in 0..grid.channels() {
        for r in 0..out {
            let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            for c in 0..out {
                let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                data.push(bilinear_at(grid, ch, y, x));
            }
        }
    }
    Grid::new(grid.channels(), out, out, data).expect("consistent shape")
}

/// Nearest-neighbour resampling to `out x out`.
pub fn resize_nearest<T: Copy>(grid: &Grid<T>, out: usize) -> Grid<T> {
    let (h, w) = (grid.height(), grid.width());
    let mut data = Vec::with_capacity(grid.channels() * out * out);
    for ch in 0..grid.channels() {
        for r in 0..out {
            let y = (((r as f64 + 0.5) * h as f64 / out as f64) as usize).min(h - 1);
            for c in 0..out {
                let x = (((c as f64 + 0.5) * w as f64 / out as f64) as usize).min(w - 1);
                data.push(grid.get(ch, y, x));
            }
        }
    }
    Grid::new(grid.channels(), out, out, data).expect("consistent shape")
}

/// Bilinear sample at real coordinates clamped to the grid.
fn bilinear_at(grid: &Grid<f64>, ch: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (grid.height(), grid.width());
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = grid.get(ch, y0, x0) * (1.0 - fx) + grid.get(ch, y0, x1) * fx;
    let bottom = grid.get(ch, y1, x0) * (1.0 - fx) + grid.get(ch, y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Codec {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn files_by_stem(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() || !is_image_file(&path) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn load_image(path: &Path, size: usize) -> Result<Grid<f64>> {
    let rgb = decode(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; IMAGE_CHANNELS * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for ch in 0..IMAGE_CHANNELS {
            data[(ch * h + y as usize) * w + x as usize] = px.0[ch] as f64 / 255.0;
        }
    }
    let grid = Grid::new(IMAGE_CHANNELS, h, w, data)?;
    if h == size && w == size {
        Ok(grid)
    } else {
        Ok(resize_bilinear(&grid, size).map(|v| v.clamp(0.0, 1.0)))
    }
}

fn load_mask(path: &Path, size: usize) -> Result<Grid<u8>> {
    let luma = decode(path)?.to_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    let grid = Grid::new(1, h, w, luma.into_raw())?;
    let grid = if h == size && w == size {
        grid
    } else {
        resize_nearest(&grid, size)
    };
    Ok(grid.map(|v| u8::from(v as f64 / 255.0 > 0.5)))
}

/// Loads `images/<id>.{png,jpg}` with optional `masks/<id>.png`.
///
/// Images are resized bilinearly and masks by nearest neighbour to
/// `size x size`. Images without a mask file come back unlabeled.
pub fn load_directory(
    images_path: &Path,
    masks_path: Option<&Path>,
    size: usize,
) -> Result<Vec<Sample>> {
    let images = files_by_stem(images_path)?;
    let masks = match masks_path {
        Some(p) if p.exists() => files_by_stem(p)?,
        _ => BTreeMap::new(),
    };
    if let Some(orphan) = masks.keys().find(|k| !images.contains_key(*k)) {
        return Err(Error::Parameter(format!(
            "mask {orphan} has no matching image"
        )));
    }
    let wrap = |id: &str, e: Error| Error::File {
        id: id.to_string(),
        source: Box::new(e),
    };
    images
        .iter()
        .map(|(id, path)| {
            let image = load_image(path, size).map_err(|e| wrap(id, e))?;
            let mask = masks
                .get(id)
                .map(|p| load_mask(p, size))
                .transpose()
                .map_err(|e| wrap(id, e))?;
            Sample::new(id.clone(), image, mask)
        })
        .collect()
}

fn to_rgb8(image: &Grid<f64>) -> image::RgbImage {
    let n = image.width() as u32;
    image::RgbImage::from_fn(n, image.height() as u32, |x, y| {
        let px = |ch| (image.get(ch, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Single-channel 0/255 PNG encoding of a binary mask.
pub fn mask_to_luma(mask: &Grid<u8>) -> image::GrayImage {
    image::GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([if mask.get(0, y as usize, x as usize) > 0 { 255 } else { 0 }])
    })
}

pub fn save_mask(mask: &Grid<u8>, path: &Path) -> Result<()> {
    mask_to_luma(mask).save(path).map_err(|e| Error::Codec {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes samples into `root/images` and `root/masks` as PNG files.
pub fn write_directory(samples: &[Sample], root: &Path) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    for s in samples {
        let path = images.join(format!("{}.png", s.id));
        to_rgb8(&s.image).save(&path).map_err(|e| Error::Codec {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if let Some(m) = &s.mask {
            save_mask(m, &masks.join(format!("{}.png", s.id)))?;
        }
    }
    Ok(())
}

/// Geometric parameters of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub op: TransformOp,
    pub scale: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        op: TransformOp::IDENTITY,
        scale: 1.0,
    };

    /// Random flip, random quarter turn and a central rescale in `[0.9, 1.1]`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let flip = rng.random_bool(0.5);
        let gamma = rng.random_range(0..4);
        let scale = rng.random_range(0.9..=1.1);
        Self {
            op: TransformOp::new(gamma, flip),
            scale,
        }
    }
}

/// Central zoom by `scale`, clamping at the borders so the size is kept.
fn rescale_about_center<T: Copy>(
    grid: &Grid<T>,
    scale: f64,
    sample: impl Fn(&Grid<T>, usize, f64, f64) -> T,
) -> Grid<T> {
    let n = grid.width();
    let center = (n as f64 - 1.0) / 2.0;
    let mut out = grid.clone();
    for ch in 0..grid.channels() {
        for r in 0..n {
            let y = center + (r as f64 - center) / scale;
            for c in 0..n {
                let x = center + (c as f64 - center) / scale;
                out.set(ch, r, c, sample(grid, ch, y, x));
            }
        }
    }
    out
}

fn nearest_at<T: Copy>(grid: &Grid<T>, ch: usize, y: f64, x: f64) -> T {
    let n = grid.width() as f64;
    let yy = y.round().clamp(0.0, n - 1.0) as usize;
    let xx = x.round().clamp(0.0, n - 1.0) as usize;
    grid.get(ch, yy, xx)
}

/// Applies the same geometric transform to the image (bilinear) and mask (nearest).
pub fn augment_with(sample: &Sample, params: AugmentParams) -> Result<Sample> {
    let mut image = params.op.apply(&sample.image)?;
    let mut mask = sample.mask.as_ref().map(|m| params.op.apply(m)).transpose()?;
    if params.scale != 1.0 {
        image = rescale_about_center(&image, params.scale, bilinear_at).map(|v| v.clamp(0.0, 1.0));
        mask = mask.map(|m| rescale_about_center(&m, params.scale, nearest_at));
    }
    Ok(Sample {
        id: sample.id.clone(),
        image,
        mask,
    })
}

pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Result<Sample> {
    augment_with(sample, AugmentParams::sample(rng))
}

/// One epoch of minibatches over the pooled labeled and unlabeled samples.
///
/// The pool is shuffled, cut into chunks of `batch_size` (the last one may be
/// short), optionally augmented, and each member gets its own transformation.
pub fn make_batches<R: Rng + ?Sized>(
    split: &DatasetSplit,
    batch_size: usize,
    rng: &mut R,
    augment_on: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    if split.is_empty() {
        return Err(Error::Parameter("cannot batch an empty split".into()));
    }
    let pool: Vec<&Sample> = split.iter().collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);

    order
        .chunks(batch_size)
        .map(|chunk| {
            let mut batch = Batch {
                ids: Vec::with_capacity(chunk.len()),
                images: Vec::with_capacity(chunk.len()),
                masks: Vec::with_capacity(chunk.len()),
                labeled_flags: Vec::with_capacity(chunk.len()),
                ops: Vec::with_capacity(chunk.len()),
            };
            for &i in chunk {
                let s = if augment_on {
                    augment(pool[i], rng)?
                } else {
                    pool[i].clone()
                };
                batch.labeled_flags.push(s.mask.is_some());
                batch.ids.push(s.id);
                batch.images.push(s.image);
                batch.masks.push(s.mask);
                batch.ops.push(TransformOp::sample(rng));
            }
            Ok(batch)
        })
        .collect()
}
