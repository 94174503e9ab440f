//! Datasets: a deterministic synthetic-shapes generator for desk-scale
//! runs, and a PNG-based directory format for external data.
//!
//! Directory layout: `images/NAME.png` + `masks/NAME.png` with identical
//! name sets, plus `dataset.json` holding `num_classes` and the train/test
//! name lists. Masks are 8-bit single-channel label indices; label 0 is
//! always background.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("{0}")]
    Format(String),
    #[error("unpaired file: {0}")]
    Unpaired(String),
    #[error("mask {path} holds label {label} but the dataset declares {classes} classes")]
    LabelOutOfRange { path: PathBuf, label: u32, classes: usize },
    #[error("image and mask dimensions disagree for {0}")]
    SizeMismatch(String),
    #[error("dataset is empty")]
    Empty,
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

/// One sample: image `[C, H, W]` in `[0, 1]` and a per-pixel label map.
#[derive(Debug, Clone, PartialEq)]
pub struct DataItem {
    pub name: String,
    pub image: Tensor,
    pub labels: Vec<u32>,
}

impl DataItem {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.image.shape();
        (s[0], s[1], s[2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<DataItem>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn in_channels(&self) -> usize {
        self.items.first().map(|i| i.dims().0).unwrap_or(1)
    }
}

/// Both named splits of an on-disk dataset directory.
#[derive(Debug)]
pub struct DatasetDir {
    pub train: Dataset,
    pub test: Dataset,
    pub num_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct DatasetJson {
    num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
    train: Vec<String>,
    test: Vec<String>,
}

// ── synthetic generator ──────────────────────────────────────────────

#[derive(Clone, Copy)]
enum Shape {
    Disk { cx: f32, cy: f32, r: f32 },
    Rect { cx: f32, cy: f32, hw: f32, hh: f32 },
    Triangle { cx: f32, cy: f32, r: f32, rot: f32 },
}

impl Shape {
    /// Signed distance in pixels; negative inside.
    fn sdf(&self, x: f32, y: f32) -> f32 {
        match *self {
            Shape::Disk { cx, cy, r } => ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r,
            Shape::Rect { cx, cy, hw, hh } => ((x - cx).abs() - hw).max((y - cy).abs() - hh),
            Shape::Triangle { cx, cy, r, rot } => {
                // Convex polygon: distance is the max of the edge half-planes.
                let mut d = f32::NEG_INFINITY;
                let verts: Vec<(f32, f32)> = (0..3)
                    .map(|i| {
                        let a = rot + i as f32 * 2.0 * std::f32::consts::PI / 3.0;
                        (cx + r * a.cos(), cy + r * a.sin())
                    })
                    .collect();
                for i in 0..3 {
                    let (x0, y0) = verts[i];
                    let (x1, y1) = verts[(i + 1) % 3];
                    let (ex, ey) = (x1 - x0, y1 - y0);
                    let len = (ex * ex + ey * ey).sqrt();
                    // outward normal for counter-clockwise winding
                    let (nx, ny) = (ey / len, -ex / len);
                    d = d.max((x - x0) * nx + (y - y0) * ny);
                }
                d
            }
        }
    }
}

/// Generate `n` grayscale images of 1-3 anti-aliased shapes on a noisy
/// background, with exact label masks (disk=1, rectangle=2, triangle=3).
/// Layouts whose foreground fraction falls outside [0.02, 0.6] are
/// redrawn, so every mask is non-degenerate. Deterministic in `seed`.
pub fn synth_shapes(n: usize, size: usize, num_fg_classes: usize, seed: u64) -> Result<Dataset, DataError> {
    if size < 16 {
        return Err(DataError::InvalidArg(format!("size must be >= 16, got {size}")));
    }
    if !(1..=3).contains(&num_fg_classes) {
        return Err(DataError::InvalidArg(format!(
            "num_fg_classes must be 1..=3 (disk/rectangle/triangle), got {num_fg_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n);
    for idx in 0..n {
        let (image, labels) = loop {
            let candidate = draw_item(&mut rng, size, num_fg_classes);
            let fg = candidate.1.iter().filter(|&&l| l != 0).count() as f64 / (size * size) as f64;
            if (0.02..=0.6).contains(&fg) {
                break candidate;
            }
        };
        items.push(DataItem {
            name: format!("item_{idx:05}"),
            image: Tensor::new(vec![1, size, size], image).expect("sized buffer"),
            labels,
        });
    }
    Ok(Dataset { items, num_classes: num_fg_classes + 1, split: "synth".into() })
}

fn draw_item(rng: &mut ChaCha8Rng, size: usize, num_fg: usize) -> (Vec<f32>, Vec<u32>) {
    let s = size as f32;
    let count = rng.gen_range(1..=2usize);
    let shapes: Vec<(Shape, u32, f32)> = (0..count)
        .map(|_| {
            let class = rng.gen_range(1..=num_fg as u32);
            let cx = rng.gen_range(0.2..0.8) * s;
            let cy = rng.gen_range(0.2..0.8) * s;
            let r = rng.gen_range(0.18..0.30) * s;
            let shape = match class {
                1 => Shape::Disk { cx, cy, r },
                2 => Shape::Rect {
                    cx,
                    cy,
                    hw: r,
                    hh: rng.gen_range(0.18..0.30) * s,
                },
                _ => Shape::Triangle { cx, cy, r: r * 1.3, rot: rng.gen_range(0.0..std::f32::consts::TAU) },
            };
            // Each class occupies its own intensity band; residual pixel
            // noise and anti-aliased boundaries keep spatial context useful.
            let base = 0.35 + 0.20 * class as f32;
            let intensity = rng.gen_range(base - 0.05..base + 0.05);
            (shape, class, intensity)
        })
        .collect();

    let mut image = vec![0.0f32; size * size];
    let mut labels = vec![0u32; size * size];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let mut v = rng.gen_range(0.0..0.20f32);
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            for (shape, class, intensity) in &shapes {
                let d = shape.sdf(px, py);
                let cov = (0.5 - d).clamp(0.0, 1.0);
                v = v * (1.0 - cov) + intensity * cov;
                if d <= 0.0 {
                    labels[i] = *class;
                }
            }
            image[i] = (v + rng.gen_range(-0.01..0.01f32)).clamp(0.0, 1.0);
        }
    }
    (image, labels)
}

/// Seeded shuffle, then split into disjoint, exhaustive train/val parts.
pub fn split(dataset: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if dataset.len() < 2 {
        return Err(DataError::InvalidArg("split needs at least 2 items".into()));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..idx.len()).rev() {
        idx.swap(i, rng.gen_range(0..=i));
    }
    let n_train = ((dataset.len() as f64 * train_frac).round() as usize).clamp(1, dataset.len() - 1);
    let pick = |ids: &[usize], tag: &str| Dataset {
        items: ids.iter().map(|&i| dataset.items[i].clone()).collect(),
        num_classes: dataset.num_classes,
        split: tag.into(),
    };
    Ok((pick(&idx[..n_train], "train"), pick(&idx[n_train..], "val")))
}

// ── on-disk format ───────────────────────────────────────────────────

/// Write a dataset directory, assigning items to the train list except for
/// the trailing `test_frac` fraction (seeded shuffle decides membership).
pub fn save_dataset(ds: &Dataset, dir: &Path, test_frac: f64, seed: u64) -> Result<(), DataError> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| DataError::Io { path: d.clone(), source: e })?;
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..idx.len()).rev() {
        idx.swap(i, rng.gen_range(0..=i));
    }
    let n_test = ((ds.len() as f64) * test_frac).round() as usize;
    let test_set: std::collections::BTreeSet<usize> = idx[ds.len() - n_test..].iter().copied().collect();

    let mut train_names = Vec::new();
    let mut test_names = Vec::new();
    for (i, item) in ds.items.iter().enumerate() {
        let (c, h, w) = item.dims();
        if c != 1 {
            return Err(DataError::Format("save_dataset only writes single-channel images".into()));
        }
        let px: Vec<u8> = item.image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, px).expect("sized buffer");
        let ipath = images.join(format!("{}.png", item.name));
        img.save(&ipath).map_err(|e| DataError::Image { path: ipath.clone(), msg: e.to_string() })?;

        let mk: Vec<u8> = item.labels.iter().map(|&l| l as u8).collect();
        let mask = image::GrayImage::from_raw(w as u32, h as u32, mk).expect("sized buffer");
        let mpath = masks.join(format!("{}.png", item.name));
        mask.save(&mpath).map_err(|e| DataError::Image { path: mpath.clone(), msg: e.to_string() })?;

        if test_set.contains(&i) {
            test_names.push(item.name.clone());
        } else {
            train_names.push(item.name.clone());
        }
    }
    train_names.sort();
    test_names.sort();
    let json = DatasetJson {
        num_classes: ds.num_classes,
        class_names: None,
        train: train_names,
        test: test_names,
    };
    let jpath = dir.join("dataset.json");
    let mut f = fs::File::create(&jpath).map_err(|e| DataError::Io { path: jpath.clone(), source: e })?;
    f.write_all(serde_json::to_string_pretty(&json).expect("serializable").as_bytes())
        .map_err(|e| DataError::Io { path: jpath.clone(), source: e })?;
    Ok(())
}

/// Load a dataset directory. Pairing is by file stem; items load in stable
/// lexicographic order within each split; images are scaled to `[0, 1]`.
pub fn load_dataset(dir: &Path) -> Result<DatasetDir, DataError> {
    let jpath = dir.join("dataset.json");
    let text = fs::read_to_string(&jpath).map_err(|e| DataError::Io { path: jpath.clone(), source: e })?;
    let json: DatasetJson =
        serde_json::from_str(&text).map_err(|e| DataError::Format(format!("dataset.json: {e}")))?;

    let stems = |sub: &str| -> Result<std::collections::BTreeSet<String>, DataError> {
        let p = dir.join(sub);
        let mut out = std::collections::BTreeSet::new();
        let entries = fs::read_dir(&p).map_err(|e| DataError::Io { path: p.clone(), source: e })?;
        for entry in entries {
            let entry = entry.map_err(|e| DataError::Io { path: p.clone(), source: e })?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    out.insert(stem.to_string());
                }
            }
        }
        Ok(out)
    };
    let image_names = stems("images")?;
    let mask_names = stems("masks")?;
    if let Some(only) = image_names.symmetric_difference(&mask_names).next() {
        return Err(DataError::Unpaired(only.clone()));
    }
    if image_names.is_empty() {
        return Err(DataError::Empty);
    }

    let load_split = |names: &[String], tag: &str| -> Result<Dataset, DataError> {
        let mut sorted: Vec<&String> = names.iter().collect();
        sorted.sort();
        let mut items = Vec::with_capacity(sorted.len());
        for name in sorted {
            if !image_names.contains(name.as_str()) {
                return Err(DataError::Unpaired(name.clone()));
            }
            items.push(load_item(dir, name, json.num_classes)?);
        }
        Ok(Dataset { items, num_classes: json.num_classes, split: tag.into() })
    };
    Ok(DatasetDir {
        train: load_split(&json.train, "train")?,
        test: load_split(&json.test, "test")?,
        num_classes: json.num_classes,
    })
}

fn load_item(dir: &Path, name: &str, num_classes: usize) -> Result<DataItem, DataError> {
    let ipath = dir.join("images").join(format!("{name}.png"));
    let mpath = dir.join("masks").join(format!("{name}.png"));
    let img = image::open(&ipath).map_err(|e| DataError::Image { path: ipath.clone(), msg: e.to_string() })?;
    let mask = image::open(&mpath).map_err(|e| DataError::Image { path: mpath.clone(), msg: e.to_string() })?;

    let (image, h, w) = match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data: Vec<f32> = g.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
            (Tensor::new(vec![1, h, w], data).expect("sized buffer"), h, w)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let raw = rgb.into_raw();
            let mut data = vec![0.0f32; 3 * h * w];
            for p in 0..h * w {
                for c in 0..3 {
                    data[c * h * w + p] = raw[p * 3 + c] as f32 / 255.0;
                }
            }
            (Tensor::new(vec![3, h, w], data).expect("sized buffer"), h, w)
        }
    };

    let mask = match mask {
        image::DynamicImage::ImageLuma8(g) => g,
        _ => {
            return Err(DataError::Image {
                path: mpath.clone(),
                msg: "masks must be 8-bit single channel".into(),
            })
        }
    };
    if (mask.width() as usize, mask.height() as usize) != (w, h) {
        return Err(DataError::SizeMismatch(name.to_string()));
    }
    let labels: Vec<u32> = mask.into_raw().iter().map(|&v| v as u32).collect();
    if let Some(&bad) = labels.iter().max() {
        if bad as usize >= num_classes {
            return Err(DataError::LabelOutOfRange { path: mpath, label: bad, classes: num_classes });
        }
    }
    Ok(DataItem { name: name.to_string(), image, labels })
}
