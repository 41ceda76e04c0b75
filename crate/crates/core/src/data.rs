//! Scenes, synthetic generation, augmentation and manifest ingestion.

use std::path::{Path, PathBuf};

use cmlp_tensor::{Rng, Tensor};
use image::imageops::FilterType;
use image::{Rgb32FImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, io_err, Error, Result};

/// An image with its count label and, for synthetic scenes, object centers.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub count: f64,
    /// `(x, y)` centers in pixels.
    pub points: Option<Vec<(f64, f64)>>,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Fractional radius shrink from the bottom row to the top row.
    pub perspective: f64,
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            count_min: 20,
            count_max: 80,
            radius_min: 1.5,
            radius_max: 3.0,
            perspective: 0.5,
            texture_amplitude: 0.08,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count_min > self.count_max {
            return config_err("count_min exceeds count_max");
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return config_err("blob radii must be positive and ordered");
        }
        if !(0.0..1.0).contains(&self.perspective) {
            return config_err("perspective must lie in [0, 1)");
        }
        if self.width == 0 || self.height == 0 {
            return config_err("scene extent must be positive");
        }
        Ok(())
    }
}

/// Renders soft Gaussian blobs, smaller towards the top, over a smooth
/// textured background. The label is the exact number of blobs.
pub fn generate_scene(cfg: &SynthConfig, rng: &mut Rng) -> Result<SceneSample> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];

    let base: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.15, 0.35)).collect();
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.uniform_range(0.02, 0.15),
                rng.uniform_range(0.02, 0.15),
                rng.uniform_range(0.0, std::f64::consts::TAU),
                rng.uniform_range(0.5, 1.0),
            ]
        })
        .collect();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let tex: f64 = waves
                    .iter()
                    .map(|[fx, fy, ph, a]| a * (fx * x as f64 + fy * y as f64 + ph + c as f64).sin())
                    .sum::<f64>()
                    / waves.len() as f64;
                data[c * plane + y * w + x] = base[c] + cfg.texture_amplitude * tex;
            }
        }
    }

    let n = rng.int_inclusive(cfg.count_min, cfg.count_max);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.uniform_range(0.0, w as f64);
        let y = rng.uniform_range(0.0, h as f64);
        let scale = 1.0 - cfg.perspective * (1.0 - y / h as f64);
        let r = rng.uniform_range(cfg.radius_min, cfg.radius_max) * scale;
        let intensity = rng.uniform_range(0.5, 0.9);
        let tint: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.7, 1.0)).collect();
        let reach = (3.0 * r).ceil() as isize;
        let (cx, cy) = (x.floor() as isize, y.floor() as isize);
        for py in (cy - reach).max(0)..(cy + reach + 1).min(h as isize) {
            for px in (cx - reach).max(0)..(cx + reach + 1).min(w as isize) {
                let dx = px as f64 + 0.5 - x;
                let dy = py as f64 + 0.5 - y;
                let g = intensity * (-(dx * dx + dy * dy) / (2.0 * r * r)).exp();
                let at = py as usize * w + px as usize;
                for (c, t) in tint.iter().enumerate() {
                    data[c * plane + at] += g * t;
                }
            }
        }
        points.push((x, y));
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(SceneSample {
        image: Tensor::new(vec![3, h, w], data)?,
        count: n as f64,
        points: Some(points),
    })
}

/// Scene `index` of the dataset seeded by `cfg.seed`; independent of generation order.
pub fn generate_indexed(cfg: &SynthConfig, index: u64) -> Result<SceneSample> {
    generate_scene(cfg, &mut Rng::derive(cfg.seed, index))
}

/// Points in the half-open window `[left, left+w) × [top, top+h)`, translated to its origin.
pub fn points_in_window(
    points: &[(f64, f64)],
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Vec<(f64, f64)> {
    let (t, l) = (top as f64, left as f64);
    let (b, r) = (t + height as f64, l + width as f64);
    points
        .iter()
        .filter(|&&(x, y)| x >= l && x < r && y >= t && y < b)
        .map(|&(x, y)| (x - l, y - t))
        .collect()
}

/// Copies the `[top, top+height) × [left, left+width)` window of a `[C, H, W]` image.
pub fn crop_image(image: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if top + height > h || left + width > w {
        return Err(Error::Parameter(format!(
            "window {height}x{width} at ({top}, {left}) exceeds {h}x{w}"
        )));
    }
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in top..top + height {
            let row = ch * h * w + y * w;
            out.extend_from_slice(&image.data()[row + left..row + left + width]);
        }
    }
    Ok(Tensor::new(vec![c, height, width], out)?)
}

/// Uniform square crop; the new label counts the points inside the window.
pub fn random_crop(sample: &SceneSample, size: usize, rng: &mut Rng) -> Result<SceneSample> {
    let points = sample.points.as_ref().ok_or_else(|| {
        Error::Unsupported("cropping needs point annotations to derive the crop count".into())
    })?;
    let (h, w) = (sample.height(), sample.width());
    if size == 0 || size > h.min(w) {
        return Err(Error::Parameter(format!("crop {size} does not fit {h}x{w}")));
    }
    let top = rng.int_inclusive(0, h - size);
    let left = rng.int_inclusive(0, w - size);
    let inside = points_in_window(points, top, left, size, size);
    Ok(SceneSample {
        image: crop_image(&sample.image, top, left, size, size)?,
        count: inside.len() as f64,
        points: Some(inside),
    })
}

/// Mirrors the image left-right; point `x` maps to `W − x`.
pub fn flip_horizontal(sample: &SceneSample) -> SceneSample {
    let (h, w) = (sample.height(), sample.width());
    let mut image = sample.image.clone();
    let src = sample.image.data();
    for (i, v) in image.data_mut().iter_mut().enumerate() {
        let (row, x) = (i / w, i % w);
        *v = src[row * w + (w - 1 - x)];
    }
    debug_assert_eq!(image.numel(), 3 * h * w);
    SceneSample {
        image,
        count: sample.count,
        points: sample
            .points
            .as_ref()
            .map(|p| p.iter().map(|&(x, y)| (w as f64 - x, y)).collect()),
    }
}

/// `clamp(gain · pixel + offset, 0, 1)`.
pub fn apply_lighting(sample: &SceneSample, gain: f64, offset: f64) -> SceneSample {
    SceneSample {
        image: sample.image.map(|v| (gain * v + offset).clamp(0.0, 1.0)),
        count: sample.count,
        points: sample.points.clone(),
    }
}

pub const FLIP_PROB: f64 = 0.5;
pub const LIGHTING_PROB: f64 = 0.5;
pub const GAIN_RANGE: (f64, f64) = (0.8, 1.2);
pub const OFFSET_RANGE: (f64, f64) = (-0.1, 0.1);

/// Random horizontal flip and random lighting, each with probability 0.5.
pub fn augment(sample: &SceneSample, rng: &mut Rng) -> SceneSample {
    let mut out = if rng.bernoulli(FLIP_PROB) {
        flip_horizontal(sample)
    } else {
        sample.clone()
    };
    if rng.bernoulli(LIGHTING_PROB) {
        let gain = rng.uniform_range(GAIN_RANGE.0, GAIN_RANGE.1);
        let offset = rng.uniform_range(OFFSET_RANGE.0, OFFSET_RANGE.1);
        out = apply_lighting(&out, gain, offset);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Resolved against the manifest's directory.
    pub image: PathBuf,
    pub count: f64,
}

/// Parses `image,count` rows; paths are relative to the manifest file.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let bad = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    let mut seen_header = false;
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            bad(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.iter().all(str::is_empty) {
            continue;
        }
        if !seen_header {
            if row.len() != 2 || &row[0] != "image" || &row[1] != "count" {
                return Err(bad(line, "expected header `image,count`".into()));
            }
            seen_header = true;
            continue;
        }
        if row.len() != 2 {
            return Err(bad(line, format!("expected 2 fields, found {}", row.len())));
        }
        let count: f64 = row[1]
            .parse()
            .map_err(|_| bad(line, format!("count `{}` is not a number", &row[1])))?;
        if !count.is_finite() || count < 0.0 {
            return Err(bad(line, format!("count {count} must be nonnegative")));
        }
        if row[0].is_empty() {
            return Err(bad(line, "empty image path".into()));
        }
        records.push(ManifestRecord {
            image: base.join(&row[0]),
            count,
        });
    }
    Ok(records)
}

/// Writes a manifest whose paths are relative to its own directory.
pub fn write_manifest(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut text = String::from("image,count\n");
    for (image, count) in rows {
        text.push_str(&format!("{image},{count}\n"));
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// Reads an 8-bit image as a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    Ok(rgb8_to_tensor(&img))
}

pub fn rgb8_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("nonempty image")
}

pub fn tensor_to_rgb8(image: &Tensor) -> RgbImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = w * h;
    let d = image.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| {
            (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    })
}

pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    tensor_to_rgb8(image)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Bilinear resize of a `[3, H, W]` image to `width`×`height`.
pub fn resize(image: &Tensor, width: usize, height: usize) -> Result<Tensor> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    if width == 0 || height == 0 {
        return Err(Error::Parameter("resize target must be nonempty".into()));
    }
    let plane = w * h;
    let d = image.data();
    let src = Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| d[c * plane + i] as f32))
    });
    let out = image::imageops::resize(&src, width as u32, height as u32, FilterType::Triangle);
    let oplane = width * height;
    let mut data = vec![0.0; 3 * oplane];
    for (i, px) in out.pixels().enumerate() {
        for c in 0..3 {
            data[c * oplane + i] = px[c] as f64;
        }
    }
    Ok(Tensor::new(vec![3, height, width], data)?)
}

/// Fixed output extents: the longer input side maps to `long_side`, the
/// other to `short_side`. Aspect ratio is not preserved; smaller images are
/// upscaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResizePolicy {
    pub long_side: usize,
    pub short_side: usize,
}

impl Default for ResizePolicy {
    fn default() -> Self {
        Self {
            long_side: 1024,
            short_side: 768,
        }
    }
}

impl ResizePolicy {
    /// `(width, height)` after resizing an input of `width`×`height`.
    pub fn target(&self, width: usize, height: usize) -> (usize, usize) {
        if width >= height {
            (self.long_side, self.short_side)
        } else {
            (self.short_side, self.long_side)
        }
    }

    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let (w, h) = self.target(image.shape()[2], image.shape()[1]);
        resize(image, w, h)
    }
}

/// Renders `n` scenes into `dir` as PNGs plus `manifest.csv`; returns the manifest path.
pub fn export_synthetic(dir: &Path, cfg: &SynthConfig, n: usize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let scene = generate_indexed(cfg, i as u64)?;
        let name = format!("scene_{i:05}.png");
        write_png(&dir.join(&name), &scene.image)?;
        rows.push((name, scene.count));
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}
