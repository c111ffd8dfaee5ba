//! PNG persistence, paired datasets, cropping and the synthetic toy pairs.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use png::{BitDepth, ColorType, Transformations};
use rand::Rng;

use crate::degradation::rng_from_seed;
use crate::error::{ensure, invalid, Error, Result};
use crate::imaging::Image;
use crate::persist;

/// A registered visible/infrared pair, both 3-channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub vis: Image,
    pub ir: Image,
    pub id: String,
}

impl ImagePair {
    /// Promotes grayscale inputs to 3 channels; rejects differing sizes.
    pub fn new(vis: Image, ir: Image, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        ensure!(
            vis.height() == ir.height() && vis.width() == ir.width(),
            "pair {id}: visible is {}x{} but infrared is {}x{}",
            vis.height(),
            vis.width(),
            ir.height(),
            ir.width()
        );
        Ok(ImagePair {
            vis: vis.to_rgb(),
            ir: ir.to_rgb(),
            id,
        })
    }

    pub fn height(&self) -> usize {
        self.vis.height()
    }

    pub fn width(&self) -> usize {
        self.vis.width()
    }
}

fn format_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Decodes an 8- or 16-bit PNG; grayscale becomes 3 identical channels and
/// alpha is dropped.
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::EXPAND);
    let fmt = |e: png::DecodingError| Error::Format(e.to_string());
    let mut reader = decoder.read_info().map_err(fmt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let stored = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(Error::Format("unexpanded palette image".into())),
    };
    let samples: Vec<f64> = match info.bit_depth {
        BitDepth::Eight => buf[..info.buffer_size()].iter().map(|&v| v as f64 / 255.0).collect(),
        BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
            .collect(),
        d => return Err(Error::Format(format!("unsupported bit depth {d:?}"))),
    };
    let color = if stored >= 3 { 3 } else { 1 };
    let img = Image::from_fn(color, h, w, |c, y, x| samples[(y * w + x) * stored + c])?;
    Ok(img.to_rgb())
}

/// 8-bit encoding with round-to-nearest quantization; 1-channel images are
/// written as grayscale, 3-channel images as RGB.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims();
    let mut pixels = Vec::with_capacity(c * h * w);
    for p in 0..h * w {
        for ch in 0..c {
            pixels.push((img.plane(ch)[p] * 255.0).round() as u8);
        }
    }
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
    enc.set_color(if c == 3 { ColorType::Rgb } else { ColorType::Grayscale });
    enc.set_depth(BitDepth::Eight);
    let fail = |e: png::EncodingError| invalid!("png encoding failed: {e}");
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(&pixels).map_err(fail)?;
    writer.finish().map_err(fail)?;
    Ok(out)
}

pub fn load_png(path: &Path) -> Result<Image> {
    let bytes = persist::read(path)?;
    decode_png(&bytes).map_err(|e| match e {
        Error::Format(m) => format_error(path, m),
        other => other,
    })
}

/// Atomic: a concurrent reader sees either the old or the new file.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    persist::write_atomic(path, &encode_png(img)?)
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    if !dir.is_dir() {
        return Err(format_error(dir, "missing directory"));
    }
    let mut names = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            names.insert(entry.file_name().to_string_lossy().into_owned());
        }
    }
    Ok(names)
}

/// File names present in every `root/<subdir>`, sorted. Files missing from
/// some subdirectory are skipped with a warning, or rejected when `strict`.
pub fn matched_files(root: &Path, subdirs: &[&str], strict: bool) -> Result<Vec<String>> {
    let sets = subdirs
        .iter()
        .map(|d| png_names(&root.join(d)))
        .collect::<Result<Vec<_>>>()?;
    let all: BTreeSet<&String> = sets.iter().flatten().collect();
    let mut matched = Vec::new();
    for name in all {
        let missing: Vec<&str> = subdirs
            .iter()
            .zip(&sets)
            .filter(|(_, s)| !s.contains(name))
            .map(|(d, _)| *d)
            .collect();
        if missing.is_empty() {
            matched.push(name.clone());
        } else if strict {
            return Err(format_error(
                &root.join(name),
                format!("no counterpart in {}/", missing.join("/, ")),
            ));
        } else {
            log::warn!("skipping {name}: no counterpart in {}/", missing.join("/, "));
        }
    }
    if matched.is_empty() {
        return Err(Error::EmptyDataset(root.display().to_string()));
    }
    Ok(matched)
}

/// Pairs under `root/vis` and `root/ir`, matched by file name, loaded on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    root: PathBuf,
    files: Vec<String>,
}

impl PairedDataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn file_names(&self) -> &[String] {
        &self.files
    }

    /// Pair ids: file names without the extension.
    pub fn ids(&self) -> Vec<String> {
        self.files.iter().map(|f| file_id(f)).collect()
    }

    pub fn load(&self, index: usize) -> Result<ImagePair> {
        let name = self
            .files
            .get(index)
            .ok_or_else(|| invalid!("pair index {index} out of range for {} pairs", self.files.len()))?;
        let vis = load_png(&self.root.join("vis").join(name))?;
        let ir = load_png(&self.root.join("ir").join(name))?;
        ImagePair::new(vis, ir, file_id(name))
    }

    pub fn load_all(&self) -> Result<Vec<ImagePair>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

fn file_id(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map_or_else(|| name.to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn load_pair_dataset(root: &Path, strict: bool) -> Result<PairedDataset> {
    Ok(PairedDataset {
        root: root.to_path_buf(),
        files: matched_files(root, &["vis", "ir"], strict)?,
    })
}

/// The same random `size x size` window from both modalities.
pub fn random_crop_pair<R: Rng>(pair: &ImagePair, size: usize, rng: &mut R) -> Result<ImagePair> {
    ensure!(
        size > 0 && size.is_multiple_of(8),
        "crop size must be a positive multiple of 8, got {size}"
    );
    let (h, w) = (pair.height(), pair.width());
    ensure!(size <= h.min(w), "crop size {size} exceeds image {h}x{w}");
    let y = rng.random_range(0..=h - size);
    let x = rng.random_range(0..=w - size);
    Ok(ImagePair {
        vis: pair.vis.crop(y, x, size, size)?,
        ir: pair.ir.crop(y, x, size, size)?,
        id: pair.id.clone(),
    })
}

/// A toy pair plus the generator's low-light mask (row-major, `true` inside).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub pair: ImagePair,
    pub mask: Vec<bool>,
}

/// Relative contrast of the visible texture carried into the infrared image.
const IR_SCENE_TRACE: f64 = 0.3;

/// Visible: a textured colored scene with a dark elliptical low-light region.
/// Infrared: a smooth dim low-texture field with bright blobs inside that region.
pub fn synth_pair<R: Rng>(size: usize, id: &str, rng: &mut R) -> Result<SynthPair> {
    ensure!(
        size >= 8 && size.is_multiple_of(8),
        "synthetic size must be a positive multiple of 8, got {size}"
    );
    let s = size as f64;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.45..0.8));
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.random_range(0.04..0.08),
                rng.random_range(3.0..12.0) / s,
                rng.random_range(0.0..TAU),
                rng.random_range(0.0..TAU),
            ]
        })
        .collect();
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.3));
    let (cy, cx) = (rng.random_range(0.3..0.7) * s, rng.random_range(0.3..0.7) * s);
    let (ry, rx) = (rng.random_range(0.18..0.3) * s, rng.random_range(0.18..0.3) * s);
    let inside = |y: f64, x: f64| ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0;

    let texture = |y: f64, x: f64| {
        waves
            .iter()
            .map(|&[a, f, theta, phase]| a * (TAU * f * (x * theta.cos() + y * theta.sin()) + phase).sin())
            .sum::<f64>()
    };
    let vis = Image::from_fn(3, size, size, |c, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let lit = (base[c] + tint[c] * texture(yf, xf)).clamp(0.0, 1.0);
        if inside(yf, xf) {
            0.12 * lit + 0.02
        } else {
            lit
        }
    })?;

    let blobs: Vec<[f64; 4]> = (0..rng.random_range(1..=3))
        .map(|_| {
            let r = 0.6 * rng.random_range(0.0f64..1.0).sqrt();
            let t = rng.random_range(0.0..TAU);
            [
                cy + r * ry * t.sin(),
                cx + r * rx * t.cos(),
                rng.random_range(s / 20.0..s / 10.0),
                rng.random_range(0.5..0.7),
            ]
        })
        .collect();
    let (gy, gx) = (rng.random_range(0.5..1.5) / s, rng.random_range(0.5..1.5) / s);
    let ir = Image::from_fn(1, size, size, |_, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        // Thermal images keep a faint trace of scene structure.
        let field = 0.2 + 0.05 * (1.0 + (TAU * (gy * yf + gx * xf)).sin()) + IR_SCENE_TRACE * texture(yf, xf);
        let heat: f64 = blobs
            .iter()
            .map(|&[by, bx, sd, amp]| amp * (-((yf - by).powi(2) + (xf - bx).powi(2)) / (2.0 * sd * sd)).exp())
            .sum();
        (field + heat).clamp(0.0, 1.0)
    })?;

    let mask = (0..size * size)
        .map(|p| inside((p / size) as f64, (p % size) as f64))
        .collect();
    Ok(SynthPair {
        pair: ImagePair::new(vis, ir, id)?,
        mask,
    })
}

/// `n` toy pairs in memory, ids `0000`, `0001`, ...
pub fn synth_pairs(n: usize, size: usize, seed: u64) -> Result<Vec<SynthPair>> {
    ensure!(n >= 1, "need at least one synthetic pair");
    let mut rng = rng_from_seed(seed);
    (0..n).map(|k| synth_pair(size, &format!("{k:04}"), &mut rng)).collect()
}

/// Writes `n` toy pairs to `out_root/vis` and `out_root/ir`.
pub fn synth_toy_dataset(n: usize, size: usize, seed: u64, out_root: &Path) -> Result<PairedDataset> {
    let pairs = synth_pairs(n, size, seed)?;
    for sub in ["vis", "ir"] {
        persist::create_dir_all(&out_root.join(sub))?;
    }
    for SynthPair { pair, .. } in &pairs {
        let name = format!("{}.png", pair.id);
        save_png(&pair.vis, &out_root.join("vis").join(&name))?;
        save_png(&pair.ir, &out_root.join("ir").join(&name))?;
    }
    load_pair_dataset(out_root, true)
}
