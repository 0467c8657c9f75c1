use std::path::{Path, PathBuf};

use image::{imageops, GrayImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::arch::ArchSpec;
use crate::Tensor;

/// Annotated defect probabilities of the benchmark.
pub const PROBABILITY_LEVELS: [f64; 4] = [0.0, 0.33, 0.67, 1.0];
pub const DEFECT_THRESHOLD: f64 = 0.5;
/// Distance within which a manifest value snaps to a canonical level
/// (the public labels store thirds as 0.3333.. and 0.6666..).
const LEVEL_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellType {
    Mono,
    Poly,
}

impl CellType {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mono => "mono",
            Self::Poly => "poly",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectClass {
    Functional = 0,
    Defective = 1,
}

impl DefectClass {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Self::Functional
        } else {
            Self::Defective
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Functional => "functional",
            Self::Defective => "defective",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub defect_probability: f64,
    pub cell_type: CellType,
    /// `None` until [`split_dataset`] assigns one.
    pub split: Option<Split>,
}

impl SampleRecord {
    pub fn class(&self) -> DefectClass {
        binarize_label(self.defect_probability)
    }
}

pub fn binarize_label(p: f64) -> DefectClass {
    binarize_label_with(p, DEFECT_THRESHOLD)
}

pub fn binarize_label_with(p: f64, threshold: f64) -> DefectClass {
    if p >= threshold {
        DefectClass::Defective
    } else {
        DefectClass::Functional
    }
}

fn canonical_level(p: f64) -> Option<f64> {
    PROBABILITY_LEVELS.iter().copied().find(|l| (p - l).abs() <= LEVEL_TOLERANCE)
}

/// Reads a `path,probability,type` manifest. Relative image paths resolve
/// against the manifest's directory. Every bad row is reported with its
/// line number in a single error.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>, TrainError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let file = std::fs::File::open(path).map_err(TrainError::io(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let manifest_err = |issues| TrainError::Manifest {
        path: shown.clone(),
        issues,
    };

    let header = reader.headers().map_err(|e| manifest_err(vec![(1, e.to_string())]))?.clone();
    let expected = ["path", "probability", "type"];
    if header.len() != 3 || header.iter().zip(expected).any(|(h, e)| !h.eq_ignore_ascii_case(e)) {
        return Err(manifest_err(vec![(
            1,
            format!("header must be `path,probability,type`, found `{}`", header.iter().collect::<Vec<_>>().join(",")),
        )]));
    }

    let mut records = Vec::new();
    let mut issues = Vec::new();
    for row in reader.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                issues.push((line, e.to_string()));
                continue;
            }
        };
        let line = row.position().map_or(0, |p| p.line() as usize);
        match parse_row(&row, base) {
            Ok(r) => records.push(r),
            Err(msg) => issues.push((line, msg)),
        }
    }
    if issues.is_empty() {
        Ok(records)
    } else {
        Err(manifest_err(issues))
    }
}

fn parse_row(row: &csv::StringRecord, base: &Path) -> Result<SampleRecord, String> {
    let rel = row.get(0).filter(|s| !s.is_empty()).ok_or("empty image path")?;
    let raw = row.get(1).unwrap_or_default();
    let p: f64 = raw.parse().map_err(|_| format!("probability `{raw}` is not a number"))?;
    let defect_probability =
        canonical_level(p).ok_or_else(|| format!("probability {p} is not one of the levels {PROBABILITY_LEVELS:?}"))?;
    let cell_type = match row.get(2).unwrap_or_default().to_ascii_lowercase().as_str() {
        "mono" => CellType::Mono,
        "poly" => CellType::Poly,
        other => return Err(format!("unknown cell type `{other}` (expected mono or poly)")),
    };
    let image_path = base.join(rel);
    if !image_path.is_file() {
        return Err(format!("image file {} not found", image_path.display()));
    }
    Ok(SampleRecord {
        image_path,
        defect_probability,
        cell_type,
        split: None,
    })
}

/// Assigns a stratified train/test split. Each class contributes its
/// proportional share; leftover train slots go to the classes with the
/// largest fractional remainder so the total is `round(N * ratio)`.
pub fn split_dataset(records: &[SampleRecord], ratio: f64, seed: u64) -> Result<Vec<SampleRecord>, TrainError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(TrainError::Split(format!("ratio must lie in (0, 1), got {ratio}")));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, r) in records.iter().enumerate() {
        by_class[r.class().index()].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < 2 {
            return Err(TrainError::Split(format!(
                "class {} has {} sample(s); at least 2 are required",
                DefectClass::from_index(c).as_str(),
                members.len()
            )));
        }
    }

    let total = (records.len() as f64 * ratio).round() as usize;
    let exact: Vec<f64> = by_class.iter().map(|m| m.len() as f64 * ratio).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order = [0usize, 1];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = total.saturating_sub(quota.iter().sum());
    for &c in order.iter().cycle().take(4) {
        if left == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            left -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = records.to_vec();
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        for (k, &i) in members.iter().enumerate() {
            out[i].split = Some(if k < quota[c] { Split::Train } else { Split::Test });
        }
    }
    Ok(out)
}

/// A preprocessed network input with its binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Shape (1, C, H, W), normalized per the spec.
    pub input: Tensor<f32>,
    pub label: usize,
}

/// Converts a grayscale image to a normalized (1, C, H, W) tensor,
/// resizing bilinearly when its size differs from the spec's input.
pub fn image_to_tensor(img: &GrayImage, spec: &ArchSpec) -> Tensor<f32> {
    let s = spec.input_shape();
    let resized;
    let img = if img.dimensions() != (s.w as u32, s.h as u32) {
        log::warn!(
            "resizing {}x{} image to {}x{} (bilinear)",
            img.width(),
            img.height(),
            s.w,
            s.h
        );
        resized = imageops::resize(img, s.w as u32, s.h as u32, imageops::FilterType::Triangle);
        &resized
    } else {
        img
    };
    let norm = spec.normalization;
    let plane: Vec<f32> = img.as_raw().iter().map(|&p| norm.apply(p as f64) as f32).collect();
    let mut data = Vec::with_capacity(plane.len() * s.c);
    for _ in 0..s.c {
        data.extend_from_slice(&plane);
    }
    Tensor::from_vec([1, s.c, s.h, s.w], data).expect("input shape")
}

pub fn load_image(path: impl AsRef<Path>, spec: &ArchSpec) -> Result<Tensor<f32>, TrainError> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| TrainError::Image {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(image_to_tensor(&img.to_luma8(), spec))
}

/// Loads and preprocesses every record.
pub fn load_samples(records: &[SampleRecord], spec: &ArchSpec) -> Result<Vec<Sample>, TrainError> {
    records
        .iter()
        .map(|r| {
            Ok(Sample {
                input: load_image(&r.image_path, spec)?,
                label: r.class().index(),
            })
        })
        .collect()
}
