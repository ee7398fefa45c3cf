//! Dataset discovery and the synthetic texture dataset.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `class/test/<defect>/*.png` with `class/ground_truth/<defect>/<stem>_mask.png`;
    /// `test/good` holds the normal images.
    #[default]
    Mvtec,
    /// Images listed in `manifest.csv` (`image,class,label`), no masks.
    Flat,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvtec" => Ok(Layout::Mvtec),
            "flat" => Ok(Layout::Flat),
            other => Err(Error::InvalidConfig(format!("unknown layout `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Dataset-relative path with `/` separators.
    pub id: String,
    pub image: PathBuf,
    pub class: String,
    pub label: bool,
    pub mask: Option<PathBuf>,
    pub split: String,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp")
    )
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn relative_id(root: &Path, p: &Path) -> String {
    let rel = p.strip_prefix(root).unwrap_or(p);
    rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/")
}

/// Test samples under `root`, ordered lexicographically by relative path.
/// For the mvtec layout `root` may be a dataset root holding class
/// directories or a single class directory (one with a `test/` child).
pub fn load_dataset(root: &Path, layout: Layout) -> Result<Vec<Sample>> {
    if !root.is_dir() {
        return Err(Error::LayoutViolation(format!("{} is not a directory", root.display())));
    }
    let mut samples = match layout {
        Layout::Mvtec => load_mvtec(root)?,
        Layout::Flat => load_flat(root)?,
    };
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(samples)
}

fn load_mvtec(root: &Path) -> Result<Vec<Sample>> {
    let class_dirs: Vec<PathBuf> = if root.join("test").is_dir() {
        vec![root.to_path_buf()]
    } else {
        sorted_entries(root)?.into_iter().filter(|p| p.join("test").is_dir()).collect()
    };
    if class_dirs.is_empty() {
        return Err(Error::LayoutViolation(format!("no <class>/test directories under {}", root.display())));
    }
    let id_root = if class_dirs.len() == 1 && class_dirs[0] == root { root.parent().unwrap_or(root) } else { root };
    let mut out = Vec::new();
    for class_dir in class_dirs {
        let class = file_name(&class_dir);
        for defect_dir in sorted_entries(&class_dir.join("test"))? {
            if !defect_dir.is_dir() {
                continue;
            }
            let defect = file_name(&defect_dir);
            let label = defect != "good";
            for image in sorted_entries(&defect_dir)?.into_iter().filter(|p| is_image(p)) {
                let mask = if label { Some(find_mask(&class_dir, &defect, &image)?) } else { None };
                out.push(Sample {
                    id: relative_id(id_root, &image),
                    image,
                    class: class.clone(),
                    label,
                    mask,
                    split: "test".into(),
                });
            }
        }
    }
    Ok(out)
}

fn find_mask(class_dir: &Path, defect: &str, image: &Path) -> Result<PathBuf> {
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let gt = class_dir.join("ground_truth").join(defect);
    [format!("{stem}_mask.png"), format!("{stem}.png")]
        .iter()
        .map(|n| gt.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::MissingMask(image.to_path_buf()))
}

#[derive(Deserialize)]
struct ManifestRow {
    image: String,
    class: String,
    label: u8,
}

fn load_flat(root: &Path) -> Result<Vec<Sample>> {
    let manifest = root.join("manifest.csv");
    let mut reader = csv::Reader::from_path(&manifest)
        .map_err(|e| Error::LayoutViolation(format!("{}: {e}", manifest.display())))?;
    let mut out = Vec::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| Error::LayoutViolation(format!("{}: {e}", manifest.display())))?;
        if row.label > 1 {
            return Err(Error::LayoutViolation(format!("label {} for {} is not 0/1", row.label, row.image)));
        }
        let image = root.join(&row.image);
        if !image.is_file() {
            return Err(Error::LayoutViolation(format!("listed image {} does not exist", image.display())));
        }
        out.push(Sample {
            id: row.image.replace('\\', "/"),
            image,
            class: row.class,
            label: row.label == 1,
            mask: None,
            split: "test".into(),
        });
    }
    Ok(out)
}

/// Distinct class names in sample order.
pub fn classes(samples: &[Sample]) -> Vec<String> {
    samples.iter().map(|s| s.class.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

pub const SYNTH_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub class: String,
    /// Number of test images.
    pub count: usize,
    /// Number of normal training images.
    pub train_count: usize,
    pub seed: u64,
    pub anomaly_rate: f64,
}

impl SynthConfig {
    pub fn new(class: impl Into<String>, count: usize, seed: u64) -> Self {
        Self { class: class.into(), count, train_count: (count / 4).max(4), seed, anomaly_rate: 0.5 }
    }
}

/// Summary of a generated dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSummary {
    pub class_dir: PathBuf,
    pub test_normal: usize,
    pub test_anomalous: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DefectKind {
    Blob,
    Scratch,
}

impl DefectKind {
    fn dir(self) -> &'static str {
        match self {
            DefectKind::Blob => "blob",
            DefectKind::Scratch => "scratch",
        }
    }
}

/// Per-channel value arrays plus the defect mask of one synthetic image.
struct SynthImage {
    pixels: [Mat; 3],
    mask: Mat,
}

/// Background: a patch-aligned 4-pixel checker texture around a random
/// per-image tint, plus pixel noise.
fn background(rng: &mut ChaCha8Rng) -> [Mat; 3] {
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    let tint: [f64; 3] = std::array::from_fn(|_| 0.5 + rng.random_range(-0.06..0.06));
    std::array::from_fn(|c| {
        let mut m = Mat::zeros(SYNTH_SIDE, SYNTH_SIDE);
        for y in 0..SYNTH_SIDE {
            for x in 0..SYNTH_SIDE {
                let sx = if x % 4 < 2 { 1.0 } else { -1.0 };
                let sy = if y % 4 < 2 { 1.0 } else { -1.0 };
                m[(y, x)] = (tint[c] + 0.15 * sx * sy + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
        m
    })
}

fn paint(img: &mut SynthImage, y: usize, x: usize, value: [f64; 3]) {
    for (c, v) in value.iter().enumerate() {
        img.pixels[c][(y, x)] = *v;
    }
    img.mask[(y, x)] = 1.0;
}

fn defect_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let bright = rng.random_bool(0.5);
    std::array::from_fn(|_| if bright { rng.random_range(0.9..1.0) } else { rng.random_range(0.0..0.1) })
}

fn add_blob(img: &mut SynthImage, rng: &mut ChaCha8Rng) {
    let r = rng.random_range(2.0..4.0f64);
    let cy = rng.random_range(3.0..(SYNTH_SIDE as f64 - 3.0));
    let cx = rng.random_range(3.0..(SYNTH_SIDE as f64 - 3.0));
    let color = defect_color(rng);
    for y in 0..SYNTH_SIDE {
        for x in 0..SYNTH_SIDE {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            if dy * dy + dx * dx <= r * r {
                paint(img, y, x, color);
            }
        }
    }
}

fn add_scratch(img: &mut SynthImage, rng: &mut ChaCha8Rng) {
    let len = rng.random_range(8.0..16.0f64);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let (dy, dx) = (angle.sin(), angle.cos());
    let cy = rng.random_range(6.0..(SYNTH_SIDE as f64 - 6.0));
    let cx = rng.random_range(6.0..(SYNTH_SIDE as f64 - 6.0));
    let half_width = if rng.random_bool(0.5) { 0.5 } else { 1.0 };
    let color = defect_color(rng);
    for y in 0..SYNTH_SIDE {
        for x in 0..SYNTH_SIDE {
            let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let along = py * dy + px * dx;
            let across = (py * dx - px * dy).abs();
            if along.abs() <= len / 2.0 && across <= half_width {
                paint(img, y, x, color);
            }
        }
    }
}

fn synth_image(rng: &mut ChaCha8Rng, defect: Option<DefectKind>) -> SynthImage {
    let mut img = SynthImage { pixels: background(rng), mask: Mat::zeros(SYNTH_SIDE, SYNTH_SIDE) };
    if let Some(kind) = defect {
        let n = rng.random_range(1..=3);
        for _ in 0..n {
            match kind {
                DefectKind::Blob => add_blob(&mut img, rng),
                DefectKind::Scratch => add_scratch(&mut img, rng),
            }
        }
    }
    img
}

fn write_rgb(img: &SynthImage, path: &Path) -> Result<()> {
    let mut out = RgbImage::new(SYNTH_SIDE as u32, SYNTH_SIDE as u32);
    for y in 0..SYNTH_SIDE {
        for x in 0..SYNTH_SIDE {
            let px = std::array::from_fn(|c| crate::image_io::quantize(img.pixels[c][(y, x)]));
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    out.save(path).map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

fn write_mask(mask: &Mat, path: &Path) -> Result<()> {
    let mut out = GrayImage::new(SYNTH_SIDE as u32, SYNTH_SIDE as u32);
    for y in 0..SYNTH_SIDE {
        for x in 0..SYNTH_SIDE {
            out.put_pixel(x as u32, y as u32, Luma([if mask[(y, x)] > 0.5 { 255 } else { 0 }]));
        }
    }
    out.save(path).map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `out/<class>/{train/good, test/good, test/<defect>, ground_truth/<defect>}`.
pub fn make_synthetic_dataset(out: &Path, config: &SynthConfig) -> Result<SynthSummary> {
    if config.count < 4 {
        return Err(Error::InvalidConfig(format!("synthetic count must be at least 4, got {}", config.count)));
    }
    if config.class.trim().is_empty() {
        return Err(Error::EmptyClassName);
    }
    let class_dir = out.join(&config.class);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let train_dir = class_dir.join("train").join("good");
    create_dir(&train_dir)?;
    for i in 0..config.train_count {
        write_rgb(&synth_image(&mut rng, None), &train_dir.join(format!("{i:03}.png")))?;
    }
    let mut summary = SynthSummary { class_dir: class_dir.clone(), test_normal: 0, test_anomalous: 0 };
    for i in 0..config.count {
        let defect = rng.random_bool(config.anomaly_rate).then(|| {
            if rng.random_bool(0.5) {
                DefectKind::Blob
            } else {
                DefectKind::Scratch
            }
        });
        let img = synth_image(&mut rng, defect);
        let name = format!("{i:03}.png");
        match defect {
            None => {
                let dir = class_dir.join("test").join("good");
                create_dir(&dir)?;
                write_rgb(&img, &dir.join(&name))?;
                summary.test_normal += 1;
            }
            Some(kind) => {
                let dir = class_dir.join("test").join(kind.dir());
                let gt = class_dir.join("ground_truth").join(kind.dir());
                create_dir(&dir)?;
                create_dir(&gt)?;
                write_rgb(&img, &dir.join(&name))?;
                write_mask(&img.mask, &gt.join(format!("{i:03}_mask.png")))?;
                summary.test_anomalous += 1;
            }
        }
    }
    Ok(summary)
}
