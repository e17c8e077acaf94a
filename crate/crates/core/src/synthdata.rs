//! Ultrasound-like phantoms: soft-edged elliptical blobs on a smooth
//! background, corrupted by multiplicative speckle. Also the small file
//! formats used to move data in and out (PGM, UMAP1 float maps, manifests).

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::DiffArray;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::BinaryMask;

pub const FG_FRACTION: (f64, f64) = (0.03, 0.6);
const MAX_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub n_samples: usize,
    pub blobs_min: usize,
    pub blobs_max: usize,
    /// Gaussian sigma (pixels) softening the lesion boundary; 0 keeps it sharp.
    pub blur_sigma: f64,
    /// Number of averaged speckle looks; 0 disables speckle.
    pub speckle_looks: usize,
    /// Gaussian sigma (pixels) of the low-pass filter applied to the complex field.
    pub speckle_corr: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            height: 64,
            width: 64,
            n_samples: 200,
            blobs_min: 1,
            blobs_max: 3,
            blur_sigma: 1.5,
            speckle_looks: 4,
            speckle_corr: 1.0,
            contrast_min: 0.2,
            contrast_max: 0.4,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 4 || self.width < 4 {
            return bad(format!("image must be at least 4x4, got {}x{}", self.height, self.width));
        }
        if self.n_samples == 0 {
            return bad("gen.n_samples must be >= 1".into());
        }
        if self.blobs_min == 0 || self.blobs_min > self.blobs_max {
            return bad(format!("blob range {}..={} is invalid", self.blobs_min, self.blobs_max));
        }
        if !(self.blur_sigma >= 0.0) || !(self.speckle_corr >= 0.0) {
            return bad("blur and speckle sigmas must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.contrast_min) || !(self.contrast_min..=1.0).contains(&self.contrast_max) {
            return bad(format!("contrast range {}..{} is invalid", self.contrast_min, self.contrast_max));
        }
        Ok(())
    }

    /// Errors unless both sides are divisible by `2^depth`.
    pub fn check_divisible(&self, depth: usize) -> Result<()> {
        let m = 1usize << depth;
        if !self.height.is_multiple_of(m) || !self.width.is_multiple_of(m) {
            return Err(Error::Divisibility {
                height: self.height,
                width: self.width,
                multiple: m,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f64>,
    pub mask: BinaryMask,
    /// Sample index within its dataset (drives the RNG stream).
    pub index: usize,
}

impl Sample {
    pub fn image_array(&self) -> DiffArray {
        DiffArray::constant(&[1, self.height, self.width], self.image.clone()).expect("image matches its shape")
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.count() as f64 / (self.height * self.width) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

struct Ellipse {
    cr: f64,
    cc: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, r: f64, c: f64) -> bool {
        let (s, co) = self.theta.sin_cos();
        let dr = r - self.cr;
        let dc = c - self.cc;
        let u = dc * co + dr * s;
        let v = -dc * s + dr * co;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn draw_mask(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> BinaryMask {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let size = h.min(w);
    let count = rng.random_range(cfg.blobs_min..=cfg.blobs_max);
    let mut blobs: Vec<Ellipse> = Vec::with_capacity(count);
    for i in 0..count {
        let a = rng.random_range(0.08..0.3) * size;
        let b = rng.random_range(0.08..0.3) * size;
        let theta = rng.random_range(0.0..PI);
        let (cr, cc) = if i == 0 {
            (rng.random_range(0.25 * h..0.75 * h), rng.random_range(0.25 * w..0.75 * w))
        } else {
            // Later blobs hug the first one so the union stays one lesion-like region.
            let first = &blobs[0];
            (
                (first.cr + rng.random_range(-1.0..1.0) * first.a).clamp(0.0, h - 1.0),
                (first.cc + rng.random_range(-1.0..1.0) * first.a).clamp(0.0, w - 1.0),
            )
        };
        blobs.push(Ellipse { cr, cc, a, b, theta });
    }
    let data = (0..cfg.height * cfg.width)
        .map(|i| {
            let (r, c) = ((i / cfg.width) as f64, (i % cfg.width) as f64);
            blobs.iter().any(|e| e.contains(r, c))
        })
        .collect();
    BinaryMask::new(cfg.height, cfg.width, data).expect("mask matches config")
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(data: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; data.len()];
    for r in 0..height {
        for c in 0..width {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let cc = (c as i64 + j as i64 - radius).clamp(0, width as i64 - 1) as usize;
                acc += kv * data[r * width + cc];
            }
            tmp[r * width + c] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for r in 0..height {
        for c in 0..width {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let rr = (r as i64 + j as i64 - radius).clamp(0, height as i64 - 1) as usize;
                acc += kv * tmp[rr * width + c];
            }
            out[r * width + c] = acc;
        }
    }
    out
}

/// Unit-mean speckle: per look, a complex Gaussian field is low-pass filtered
/// with an L2-normalised kernel (so each pixel stays CN(0, 1)) and its squared
/// magnitude taken; looks are averaged. The field is drawn with a margin so
/// the filter never sees the border.
fn speckle(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let mut out = vec![0.0; h * w];
    let kernel: Vec<f64> = if cfg.speckle_corr > 0.0 {
        let k = gaussian_kernel(cfg.speckle_corr);
        let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
        k.into_iter().map(|v| v / norm).collect()
    } else {
        vec![1.0]
    };
    let radius = kernel.len() / 2;
    let (ph, pw) = (h + 2 * radius, w + 2 * radius);
    // 1-D kernel normalised in L2 applied along both axes keeps unit variance.
    for _ in 0..cfg.speckle_looks {
        let mut re: Vec<f64> = (0..ph * pw).map(|_| rng.sample::<f64, _>(StandardNormal) / 2f64.sqrt()).collect();
        let mut im: Vec<f64> = (0..ph * pw).map(|_| rng.sample::<f64, _>(StandardNormal) / 2f64.sqrt()).collect();
        for field in [&mut re, &mut im] {
            let mut rows = vec![0.0; ph * w];
            for r in 0..ph {
                for c in 0..w {
                    rows[r * w + c] = kernel.iter().enumerate().map(|(j, kv)| kv * field[r * pw + c + j]).sum();
                }
            }
            let mut cols = vec![0.0; h * w];
            for r in 0..h {
                for c in 0..w {
                    cols[r * w + c] = kernel.iter().enumerate().map(|(j, kv)| kv * rows[(r + j) * w + c]).sum();
                }
            }
            *field = cols;
        }
        for i in 0..h * w {
            out[i] += re[i] * re[i] + im[i] * im[i];
        }
    }
    let looks = cfg.speckle_looks as f64;
    out.iter_mut().for_each(|v| *v /= looks);
    out
}

fn render(cfg: &GenConfig, mask: &BinaryMask, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let background = rng.random_range(0.35..0.6);
    let contrast = rng.random_range(cfg.contrast_min..=cfg.contrast_max);
    let foreground = if rng.random::<bool>() {
        background - contrast
    } else {
        background + contrast
    };
    let indicator: Vec<f64> = mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let soft = gaussian_blur(&indicator, h, w, cfg.blur_sigma);
    let mut image: Vec<f64> = soft.iter().map(|s| background + (foreground - background) * s).collect();
    if cfg.speckle_looks > 0 {
        let noise = speckle(cfg, rng);
        for (v, n) in image.iter_mut().zip(noise) {
            *v *= n;
        }
    }
    image.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    image
}

/// The `index`-th sample of the dataset described by `cfg`; depends only on
/// `(cfg, index)`.
pub fn generate_sample(cfg: &GenConfig, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let plane = (cfg.height * cfg.width) as f64;
    for _ in 0..MAX_RETRIES {
        let mask = draw_mask(cfg, &mut rng);
        let frac = mask.count() as f64 / plane;
        if !(FG_FRACTION.0..=FG_FRACTION.1).contains(&frac) {
            continue;
        }
        let image = render(cfg, &mask, &mut rng);
        return Ok(Sample {
            height: cfg.height,
            width: cfg.width,
            image,
            mask,
            index,
        });
    }
    Err(Error::Generation(format!(
        "sample {index}: no mask with foreground fraction in [{}, {}] after {MAX_RETRIES} tries",
        FG_FRACTION.0, FG_FRACTION.1
    )))
}

pub fn generate(cfg: &GenConfig, exec: Execution) -> Result<Dataset> {
    cfg.validate()?;
    let samples = exec
        .map_range(cfg.n_samples, |i| generate_sample(cfg, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset,
        detail: detail.into(),
    }
}

/// Binary 8-bit greyscale, maxval 255.
pub fn encode_pgm(height: usize, width: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a P5 PGM with maxval 255 into `(height, width, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(format_err(0, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (n, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments before each header number.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            let what = ["width", "height", "maxval"][n];
            return Err(format_err(start, format!("expected {what}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
        *field = text.parse().map_err(|_| format_err(start, format!("number {text} out of range")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(pos, format!("maxval {maxval} unsupported, only 255")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(format_err(pos, "expected a single whitespace after maxval")),
    }
    let need = width * height;
    if bytes.len() - pos != need {
        return Err(format_err(
            pos,
            format!("expected {need} pixel bytes, found {}", bytes.len() - pos),
        ));
    }
    Ok((height, width, bytes[pos..].to_vec()))
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(height, width, pixels)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Images are quantised to 8 bits (lossy).
pub fn write_image_pgm(path: &Path, height: usize, width: usize, image: &[f64]) -> Result<()> {
    let px: Vec<u8> = image.iter().map(|&v| quantize(v)).collect();
    write_pgm(path, height, width, &px)
}

/// Masks are stored as {0, 255}; any byte above 127 reads back as foreground.
pub fn write_mask_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    let px: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_pgm(path, mask.height(), mask.width(), &px)
}

pub fn read_mask_pgm(path: &Path) -> Result<BinaryMask> {
    let (h, w, px) = read_pgm(path)?;
    BinaryMask::new(h, w, px.iter().map(|&b| b > 127).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FloatMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub fn encode_float_map(map: &FloatMap) -> Vec<u8> {
    let mut out = format!("UMAP1\n{} {}\n", map.height, map.width).into_bytes();
    for v in &map.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_float_map(bytes: &[u8]) -> Result<FloatMap> {
    const MAGIC: &[u8] = b"UMAP1\n";
    if !bytes.starts_with(MAGIC) {
        return Err(format_err(0, "missing UMAP1 magic"));
    }
    let start = MAGIC.len();
    let end = bytes[start..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| start + p)
        .ok_or_else(|| format_err(start, "unterminated dimension line"))?;
    let line = std::str::from_utf8(&bytes[start..end]).map_err(|_| format_err(start, "dimension line is not text"))?;
    let dims: Vec<usize> = line
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format_err(start, format!("bad dimensions {line:?}")))?;
    let [height, width] = dims[..] else {
        return Err(format_err(start, format!("expected two dimensions, got {line:?}")));
    };
    let payload = &bytes[end + 1..];
    if payload.len() != height * width * 4 {
        return Err(format_err(
            end + 1,
            format!("{height}x{width} map needs {} bytes, found {}", height * width * 4, payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(FloatMap { height, width, data })
}

pub fn write_float_map(path: &Path, map: &FloatMap) -> Result<()> {
    fs::write(path, encode_float_map(map)).map_err(|e| Error::io(path, e))
}

pub fn read_float_map(path: &Path) -> Result<FloatMap> {
    decode_float_map(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Writes `images/NNNN.pgm`, `masks/NNNN.pgm` and a manifest with one
/// `image=<path> mask=<path>` line per sample (paths relative to `dir`).
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let manifest_path = dir.join(MANIFEST_NAME);
    let mut manifest = Vec::new();
    for (i, s) in data.samples.iter().enumerate() {
        let image = format!("images/{i:04}.pgm");
        let mask = format!("masks/{i:04}.pgm");
        write_image_pgm(&dir.join(&image), s.height, s.width, &s.image)?;
        write_mask_pgm(&dir.join(&mask), &s.mask)?;
        writeln!(manifest, "image={image} mask={mask}").expect("writing to a Vec");
    }
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Loads a dataset from a manifest file, or from `manifest.txt` inside a directory.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    };
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut samples = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        let line_start = offset;
        offset += line.len();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut image = None;
        let mut mask = None;
        for tok in trimmed.split_whitespace() {
            match tok.split_once('=') {
                Some(("image", p)) => image = Some(base.join(p)),
                Some(("mask", p)) => mask = Some(base.join(p)),
                _ => return Err(format_err(line_start, format!("unexpected manifest token {tok:?}"))),
            }
        }
        let (Some(image), Some(mask)) = (image, mask) else {
            return Err(format_err(line_start, "manifest line needs image= and mask="));
        };
        let (h, w, px) = read_pgm(&image)?;
        let mask = read_mask_pgm(&mask)?;
        if (mask.height(), mask.width()) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "read_dataset",
                left: vec![h, w],
                right: vec![mask.height(), mask.width()],
            });
        }
        samples.push(Sample {
            height: h,
            width: w,
            image: px.iter().map(|&b| b as f64 / 255.0).collect(),
            mask,
            index: samples.len(),
        });
    }
    if samples.is_empty() {
        return Err(Error::Generation(format!("{} lists no samples", manifest_path.display())));
    }
    Ok(Dataset { samples })
}
