//! Procedural segmentation scenes with a controllable appearance shift.
//!
//! Geometry (and so the label map) depends only on the scene seed. The
//! domain spec changes how classes look: palette, texture noise, hue
//! rotation and contrast. A source and a target scene with the same seed
//! therefore share their labels exactly.
//!
//! On disk a split is `{index:05}.ppm` images (P6), `{index:05}.pgm` labels
//! (P5, 255 = ignore) and a `manifest.json`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::IGNORE_LABEL;
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

const MIN_SHAPES: usize = 3;
const MAX_SHAPES: usize = 8;
const STRIPE_GAIN: f32 = 0.18;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    /// Base RGB per class, index = class id.
    pub palette: Vec<[f32; 3]>,
    /// Std-dev of additive per-pixel Gaussian noise.
    pub texture_noise: f32,
    /// Rotation about the grey axis, degrees.
    pub hue_shift_deg: f32,
    /// Contrast about mid-grey; 1 leaves the image alone.
    pub contrast: f32,
    /// Shape extent bounds as fractions of the shorter image side.
    pub min_size: f32,
    pub max_size: f32,
    pub background: u8,
}

impl DomainSpec {
    /// Evenly spaced hues for the foreground classes over a dull background.
    pub fn source(num_classes: usize) -> Self {
        let mut palette = vec![[0.42, 0.42, 0.40]];
        let fg = num_classes.saturating_sub(1).max(1);
        for i in 0..num_classes.saturating_sub(1) {
            palette.push(hsv_to_rgb(360.0 * i as f32 / fg as f32, 0.65, 0.85));
        }
        DomainSpec {
            name: "source".into(),
            palette,
            texture_noise: 0.02,
            hue_shift_deg: 0.0,
            contrast: 1.0,
            min_size: 0.18,
            max_size: 0.45,
            background: 0,
        }
    }

    /// The source look pushed through a hue rotation, reduced contrast and
    /// heavier noise. The rotation stays well under half the hue spacing
    /// between neighbouring classes so class identity survives the shift.
    pub fn target(num_classes: usize) -> Self {
        DomainSpec {
            name: "target".into(),
            texture_noise: 0.05,
            hue_shift_deg: 20.0,
            contrast: 0.7,
            ..Self::source(num_classes)
        }
    }

    pub fn num_classes(&self) -> usize {
        self.palette.len()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if num_classes < 3 {
            return Err(Error::Config(format!("scene generation needs K >= 3, got {num_classes}")));
        }
        if num_classes > IGNORE_LABEL as usize {
            return Err(Error::Config(format!("K={num_classes} collides with the ignore label")));
        }
        if self.palette.len() != num_classes {
            return Err(Error::Config(format!(
                "palette has {} colours for K={num_classes}",
                self.palette.len()
            )));
        }
        if !(self.texture_noise >= 0.0) {
            return Err(Error::Config("texture_noise must be >= 0".into()));
        }
        if !(self.contrast > 0.0) {
            return Err(Error::Config("contrast must be > 0".into()));
        }
        if !(0.0 < self.min_size && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return Err(Error::Config("need 0 < min_size <= max_size <= 1".into()));
        }
        if self.background as usize >= num_classes {
            return Err(Error::Config("background id out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `3 × H × W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Row-major `H × W` class ids.
    pub label: Vec<u8>,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Mirror left-right.
    pub fn flipped(&self) -> SceneSample {
        let (h, w) = (self.height(), self.width());
        let src = self.image.data();
        let mut img = vec![0.0f32; src.len()];
        let mut label = vec![0u8; self.label.len()];
        for y in 0..h {
            for x in 0..w {
                label[y * w + x] = self.label[y * w + w - 1 - x];
                for ch in 0..3 {
                    img[(ch * h + y) * w + x] = src[(ch * h + y) * w + w - 1 - x];
                }
            }
        }
        SceneSample {
            image: Tensor::new([3, h, w], img).expect("same shape"),
            label,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Circle { cx: f32, cy: f32, r: f32 },
    Triangle([(f32, f32); 3]),
}

impl Shape {
    fn random(rng: &mut impl Rng, h: usize, w: usize, min: f32, max: f32) -> Shape {
        let side = h.min(w) as f32;
        let cx = rng.random_range(0.0..w as f32);
        let cy = rng.random_range(0.0..h as f32);
        let size = rng.random_range(min..=max) * side;
        match rng.random_range(0..3) {
            0 => {
                let hw = 0.5 * size * rng.random_range(0.5..=1.0);
                let hh = 0.5 * size * rng.random_range(0.5..=1.0);
                Shape::Rect {
                    x0: cx - hw,
                    y0: cy - hh,
                    x1: cx + hw,
                    y1: cy + hh,
                }
            }
            1 => Shape::Circle { cx, cy, r: 0.5 * size },
            _ => {
                let base = rng.random_range(0.0..std::f32::consts::TAU);
                let mut v = [(0.0, 0.0); 3];
                for (k, p) in v.iter_mut().enumerate() {
                    let a = base + k as f32 * std::f32::consts::TAU / 3.0 + rng.random_range(-0.4..0.4);
                    let rad = 0.5 * size * rng.random_range(0.7..=1.0);
                    *p = (cx + rad * a.cos(), cy + rad * a.sin());
                }
                Shape::Triangle(v)
            }
        }
    }

    /// Tests the pixel centre.
    fn contains(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
            Shape::Circle { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Triangle([a, b, c]) => {
                let edge = |p: (f32, f32), q: (f32, f32)| (q.0 - p.0) * (py - p.1) - (q.1 - p.1) * (px - p.0);
                let (d1, d2, d3) = (edge(a, b), edge(b, c), edge(c, a));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }
}

fn scene_labels(seed: u64, spec: &DomainSpec, k: usize, h: usize, w: usize) -> Vec<u8> {
    let mut rng = stream_rng(seed, Stream::Data);
    let mut label = vec![spec.background; h * w];
    let mut foreground: Vec<u8> = (0..k as u8).filter(|&c| c != spec.background).collect();
    loop {
        label.fill(spec.background);
        foreground.shuffle(&mut rng);
        let count = rng.random_range(MIN_SHAPES..=MAX_SHAPES);
        for i in 0..count {
            let class = foreground[i % foreground.len()];
            let shape = Shape::random(&mut rng, h, w, spec.min_size, spec.max_size);
            for y in 0..h {
                for x in 0..w {
                    if shape.contains(x, y) {
                        label[y * w + x] = class;
                    }
                }
            }
        }
        let mut seen = [false; 256];
        label.iter().for_each(|&c| seen[c as usize] = true);
        if seen.iter().filter(|&&s| s).count() >= 2 {
            return label;
        }
    }
}

/// Renders one scene. Deterministic per `(seed, spec)`; the label map
/// depends on `seed`, `K`, size bounds and background id only.
pub fn generate_scene(seed: u64, spec: &DomainSpec, k: usize, h: usize, w: usize) -> Result<SceneSample> {
    spec.validate(k)?;
    if h == 0 || w == 0 {
        return Err(Error::Config("scene size must be positive".into()));
    }
    let label = scene_labels(seed, spec, k, h, w);

    let mut rng = stream_rng(seed, Stream::Appearance);
    let gain: Vec<f32> = (0..k).map(|_| rng.random_range(0.85..=1.15)).collect();
    let phase: Vec<f32> = (0..k).map(|_| rng.random_range(0.0..std::f32::consts::TAU)).collect();
    let noise = Normal::new(0.0f32, 1.0).expect("unit normal");
    let hue = hue_rotation(spec.hue_shift_deg);

    let mut img = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let c = label[y * w + x] as usize;
            // Class-specific stripe orientation and period.
            let theta = std::f32::consts::PI * c as f32 / k as f32;
            let period = 4.0 + 2.0 * (c % 3) as f32;
            let t = (x as f32 * theta.cos() + y as f32 * theta.sin()) / period;
            let stripe = 1.0 + STRIPE_GAIN * (std::f32::consts::TAU * t + phase[c]).sin();
            let base = spec.palette[c].map(|v| v * gain[c] * stripe);
            let rot = mat3_mul(&hue, base);
            for ch in 0..3 {
                let v = 0.5 + spec.contrast * (rot[ch] - 0.5) + spec.texture_noise * noise.sample(&mut rng);
                img[(ch * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(SceneSample {
        image: Tensor::new([3, h, w], img)?,
        label,
    })
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Rotation by `deg` about the (1,1,1) axis of RGB space.
fn hue_rotation(deg: f32) -> [[f32; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let a = (1.0 - c) / 3.0;
    let b = (1.0f32 / 3.0).sqrt() * s;
    [[c + a, a - b, a + b], [a + b, c + a, a - b], [a - b, a + b, c + a]]
}

fn mat3_mul(m: &[[f32; 3]; 3], v: [f32; 3]) -> [f32; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub domain: DomainSpec,
    pub count: usize,
    /// Scene `i` was generated from seed `first_seed + i`.
    pub first_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub manifest: SplitManifest,
    pub samples: Vec<SceneSample>,
}

impl Split {
    pub fn generate(domain: &DomainSpec, k: usize, size: usize, first_seed: u64, count: usize) -> Result<Split> {
        let samples = (0..count as u64)
            .map(|i| generate_scene(first_seed + i, domain, k, size, size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Split {
            manifest: SplitManifest {
                num_classes: k,
                height: size,
                width: size,
                domain: domain.clone(),
                count,
                first_seed,
            },
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Shape of the default shift benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub num_classes: usize,
    pub size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            num_classes: 6,
            size: 64,
            train: 200,
            val: 50,
            test: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

impl Benchmark {
    /// Train and val come from the source domain, test from the target
    /// domain. Split seed ranges never overlap.
    pub fn generate(spec: &BenchmarkSpec) -> Result<Benchmark> {
        let k = spec.num_classes;
        Self::generate_with(spec, &DomainSpec::source(k), &DomainSpec::target(k))
    }

    pub fn generate_with(spec: &BenchmarkSpec, source: &DomainSpec, target: &DomainSpec) -> Result<Benchmark> {
        let (k, size) = (spec.num_classes, spec.size);
        let base = spec.seed.wrapping_mul(1_000_003);
        Ok(Benchmark {
            train: Split::generate(source, k, size, base, spec.train)?,
            val: Split::generate(source, k, size, base + 100_000, spec.val)?,
            test: Split::generate(target, k, size, base + 200_000, spec.test)?,
        })
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        for (name, split) in SPLITS.iter().zip([&self.train, &self.val, &self.test]) {
            write_dataset(&root.join(name), split)?;
        }
        Ok(())
    }

    pub fn read(root: &Path) -> Result<Benchmark> {
        Ok(Benchmark {
            train: read_dataset(&root.join("train"))?,
            val: read_dataset(&root.join("val"))?,
            test: read_dataset(&root.join("test"))?,
        })
    }
}

pub fn write_dataset(dir: &Path, split: &Split) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in split.samples.iter().enumerate() {
        let p = dir.join(format!("{i:05}.ppm"));
        fs::write(&p, encode_ppm(&s.image)?).map_err(|e| Error::io(&p, e))?;
        let p = dir.join(format!("{i:05}.pgm"));
        fs::write(&p, encode_pgm(&s.label, s.height(), s.width())?).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = split.manifest.clone();
    manifest.count = split.samples.len();
    let p = dir.join(MANIFEST);
    fs::write(&p, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&p, e))
}

pub fn read_dataset(dir: &Path) -> Result<Split> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let manifest: SplitManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: p.display().to_string(),
        offset: byte_offset(&text, e.line(), e.column()),
        msg: e.to_string(),
    })?;
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let p = dir.join(format!("{i:05}.ppm"));
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let image = decode_ppm(&bytes, &p.display().to_string())?;
        let p = dir.join(format!("{i:05}.pgm"));
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let (label, h, w) = decode_pgm(&bytes, &p.display().to_string())?;
        if image.shape() != [3, h, w] || h != manifest.height || w != manifest.width {
            return Err(Error::Parse {
                file: p.display().to_string(),
                offset: 0,
                msg: format!("size {h}x{w} disagrees with image or manifest"),
            });
        }
        if let Some(&bad) = label
            .iter()
            .find(|&&c| c != IGNORE_LABEL && c as usize >= manifest.num_classes)
        {
            return Err(Error::Parse {
                file: p.display().to_string(),
                offset: 0,
                msg: format!("label {bad} out of range for K={}", manifest.num_classes),
            });
        }
        samples.push(SceneSample { image, label });
    }
    Ok(Split { manifest, samples })
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (before + column.saturating_sub(1)) as u64
}

pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape("encode_ppm", image.shape(), &[3, 0, 0]));
    };
    let px = image.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            out.push((px[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn encode_pgm(label: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
    if label.len() != h * w {
        return Err(Error::shape("encode_pgm", &[label.len()], &[h, w]));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(label);
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8], file: &str) -> Result<Tensor<f32>> {
    let (w, h, start) = parse_header(bytes, b"P6", file)?;
    let body = payload(bytes, start, 3 * w * h, file)?;
    let mut img = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            img[ch * h * w + i] = body[3 * i + ch] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], img)
}

/// Returns `(label, height, width)`.
pub fn decode_pgm(bytes: &[u8], file: &str) -> Result<(Vec<u8>, usize, usize)> {
    let (w, h, start) = parse_header(bytes, b"P5", file)?;
    Ok((payload(bytes, start, w * h, file)?.to_vec(), h, w))
}

fn payload<'a>(bytes: &'a [u8], start: usize, len: usize, file: &str) -> Result<&'a [u8]> {
    if bytes.len() < start + len {
        return Err(Error::Parse {
            file: file.into(),
            offset: bytes.len() as u64,
            msg: format!("truncated: expected {len} pixel bytes, found {}", bytes.len() - start),
        });
    }
    Ok(&bytes[start..start + len])
}

/// Parses `magic w h maxval` plus the single whitespace byte that ends the
/// header. Returns `(w, h, payload offset)`.
fn parse_header(bytes: &[u8], magic: &[u8; 2], file: &str) -> Result<(usize, usize, usize)> {
    let err = |offset: usize, msg: String| Error::Parse {
        file: file.into(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(err(0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "expected a decimal header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| err(start, "header field overflows".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "header must end in one whitespace byte".into())),
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(err(pos, format!("maxval {maxval} unsupported, need 255")));
    }
    if w == 0 || h == 0 {
        return Err(err(pos, "zero image extent".into()));
    }
    Ok((w, h, pos))
}
