use std::io::Write;
use std::path::Path;

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{image_to_tensor, CellType, DefectClass, Sample, SampleRecord, TrainError};
use crate::arch::ArchSpec;

pub const SYNTH_SIZE: u32 = 300;

/// Label and cell type of one generated image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthImage {
    pub class: DefectClass,
    pub cell_type: CellType,
    pub defect_probability: f64,
}

/// Labels for a generated set: exactly `round(count * defect_rate)`
/// defective images at seeded positions.
fn plan(count: usize, defect_rate: f64, seed: u64) -> Result<Vec<SynthImage>, TrainError> {
    if count < 2 {
        return Err(TrainError::Config(format!("synthetic set needs at least 2 images, got {count}")));
    }
    if !(0.0..=1.0).contains(&defect_rate) {
        return Err(TrainError::Config(format!("defect rate must lie in [0, 1], got {defect_rate}")));
    }
    let defective = (count as f64 * defect_rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flags: Vec<bool> = (0..count).map(|i| i < defective).collect();
    flags.shuffle(&mut rng);
    Ok(flags
        .into_iter()
        .map(|d| {
            let cell_type = if rng.random_bool(0.5) { CellType::Mono } else { CellType::Poly };
            let (class, defect_probability) = if d {
                (DefectClass::Defective, if rng.random_bool(0.5) { 1.0 } else { 0.67 })
            } else {
                (DefectClass::Functional, if rng.random_bool(0.8) { 0.0 } else { 0.33 })
            };
            SynthImage {
                class,
                cell_type,
                defect_probability,
            }
        })
        .collect())
}

/// Multiplicative attenuation map; 1 leaves a pixel untouched.
struct Shade {
    w: usize,
    h: usize,
    f: Vec<f32>,
}

impl Shade {
    fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            f: vec![1.0; w * h],
        }
    }

    fn darken(&mut self, x: usize, y: usize, factor: f32) {
        let v = &mut self.f[y * self.w + x];
        *v = v.min(factor);
    }

    fn rect(&mut self, x0: f32, y0: f32, x1: f32, y1: f32, factor: f32) {
        let xs = x0.max(0.0) as usize..(x1.min(self.w as f32 - 1.0).max(0.0) as usize + 1);
        for y in y0.max(0.0) as usize..(y1.min(self.h as f32 - 1.0).max(0.0) as usize + 1) {
            for x in xs.clone() {
                self.darken(x, y, factor);
            }
        }
    }

    fn segment(&mut self, a: (f32, f32), b: (f32, f32), radius: f32, factor: f32) {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = (dx * dx + dy * dy).max(1e-6);
        let lo = |p: f32, q: f32| (p.min(q) - radius).floor().max(0.0) as usize;
        let hi = |p: f32, q: f32, n: usize| ((p.max(q) + radius).ceil().max(0.0) as usize).min(n - 1);
        for y in lo(a.1, b.1)..=hi(a.1, b.1, self.h) {
            for x in lo(a.0, b.0)..=hi(a.0, b.0, self.w) {
                let (px, py) = (x as f32 - a.0, y as f32 - a.1);
                let t = ((px * dx + py * dy) / len2).clamp(0.0, 1.0);
                let (ex, ey) = (px - t * dx, py - t * dy);
                if ex * ex + ey * ey <= radius * radius {
                    self.darken(x, y, factor);
                }
            }
        }
    }
}

/// Renders one electroluminescence-style cell: a bright wafer with a
/// mono (corner vignette) or poly (grain) texture, horizontal fingers and
/// three vertical busbars. Defective cells additionally carry one to three
/// dark crack polylines or finger-interruption bars.
pub fn synth_image(seed: u64, index: u64, info: &SynthImage) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    let n = SYNTH_SIZE as usize;
    let base: f32 = rng.random_range(160.0..176.0);
    let mut field = vec![base; n * n];

    match info.cell_type {
        CellType::Mono => {
            let cut: f32 = rng.random_range(30.0..45.0);
            for y in 0..n {
                for x in 0..n {
                    let (cx, cy) = ((x as f32).min((n - 1 - x) as f32), (y as f32).min((n - 1 - y) as f32));
                    let d = cx + cy;
                    if d < cut {
                        field[y * n + x] *= 0.35 + 0.65 * (d / cut);
                    }
                }
            }
        }
        CellType::Poly => {
            let waves: Vec<(f32, f32, f32, f32)> = (0..6)
                .map(|_| {
                    let th: f32 = rng.random_range(0.0..std::f32::consts::TAU);
                    let k: f32 = rng.random_range(0.02..0.08);
                    (k * th.cos(), k * th.sin(), rng.random_range(0.0..std::f32::consts::TAU), rng.random_range(2.0..5.0))
                })
                .collect();
            for y in 0..n {
                for x in 0..n {
                    let g: f32 = waves.iter().map(|&(kx, ky, ph, a)| a * (kx * x as f32 + ky * y as f32 + ph).sin()).sum();
                    field[y * n + x] += g;
                }
            }
        }
    }

    let mut shade = Shade::new(n, n);
    let pitch: usize = rng.random_range(9..13);
    for y in (rng.random_range(0..pitch)..n).step_by(pitch) {
        shade.rect(0.0, y as f32, n as f32, y as f32, 0.9);
    }
    let mut busbars = Vec::new();
    for k in 1..=3 {
        let cx = (k * n / 4) as f32 + rng.random_range(-6.0..6.0);
        let half: f32 = rng.random_range(3.0..5.0);
        shade.rect(cx - half, 0.0, cx + half, n as f32, 0.55);
        busbars.push(cx);
    }

    if info.class == DefectClass::Defective {
        for _ in 0..rng.random_range(1..=3) {
            if rng.random_bool(0.6) {
                crack(&mut shade, &mut rng, n as f32);
            } else {
                interruption(&mut shade, &mut rng, &busbars, n as f32);
            }
        }
    }

    let noise = Normal::new(0.0f32, 5.0).expect("finite std");
    let pixels: Vec<u8> = field
        .iter()
        .zip(&shade.f)
        .map(|(&v, &f)| (v * f + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage::from_raw(SYNTH_SIZE, SYNTH_SIZE, pixels).expect("buffer size")
}

fn crack(shade: &mut Shade, rng: &mut ChaCha8Rng, n: f32) {
    let mut p = (rng.random_range(0.15 * n..0.85 * n), rng.random_range(0.15 * n..0.85 * n));
    let mut heading: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let radius: f32 = rng.random_range(2.5..4.0);
    let factor: f32 = rng.random_range(0.15..0.3);
    for _ in 0..rng.random_range(4..8) {
        heading += rng.random_range(-0.7..0.7);
        let len: f32 = rng.random_range(20.0..45.0);
        let (lo, hi) = (0.08 * n, 0.92 * n);
        let mut q = (p.0 + len * heading.cos(), p.1 + len * heading.sin());
        // Turn back at the border so the whole crack stays visible.
        if !(lo..hi).contains(&q.0) {
            heading = std::f32::consts::PI - heading;
            q.0 = q.0.clamp(lo, hi);
        }
        if !(lo..hi).contains(&q.1) {
            heading = -heading;
            q.1 = q.1.clamp(lo, hi);
        }
        shade.segment(p, q, radius * 6.0, 0.5);
        shade.segment(p, q, radius, factor);
        p = q;
    }
}

fn interruption(shade: &mut Shade, rng: &mut ChaCha8Rng, busbars: &[f32], n: f32) {
    let bay = rng.random_range(0..=busbars.len());
    let left = if bay == 0 { 0.0 } else { busbars[bay - 1] };
    let right = if bay == busbars.len() { n } else { busbars[bay] };
    let y: f32 = rng.random_range(0.1 * n..0.9 * n);
    let h: f32 = rng.random_range(40.0..70.0);
    shade.rect(left + 4.0, y, right - 4.0, y + h, rng.random_range(0.25..0.45));
}

/// In-memory synthetic set, preprocessed for `spec`.
pub fn synth_samples(count: usize, defect_rate: f64, seed: u64, spec: &ArchSpec) -> Result<Vec<Sample>, TrainError> {
    Ok(plan(count, defect_rate, seed)?
        .iter()
        .enumerate()
        .map(|(i, info)| Sample {
            input: image_to_tensor(&synth_image(seed, i as u64, info), spec),
            label: info.class.index(),
        })
        .collect())
}

/// Writes `cell_NNNNN.png` images and `manifest.csv` to `out_dir` and
/// returns the records.
pub fn synth_dataset(count: usize, defect_rate: f64, seed: u64, out_dir: impl AsRef<Path>) -> Result<Vec<SampleRecord>, TrainError> {
    let out_dir = out_dir.as_ref();
    let infos = plan(count, defect_rate, seed)?;
    std::fs::create_dir_all(out_dir).map_err(TrainError::io(out_dir))?;
    let manifest_path = out_dir.join("manifest.csv");
    let mut manifest = String::from("path,probability,type\n");
    let mut records = Vec::with_capacity(count);
    for (i, info) in infos.iter().enumerate() {
        let name = format!("cell_{i:05}.png");
        let path = out_dir.join(&name);
        synth_image(seed, i as u64, info).save(&path).map_err(|e| TrainError::Image {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        manifest.push_str(&format!("{name},{},{}\n", info.defect_probability, info.cell_type.as_str()));
        records.push(SampleRecord {
            image_path: path,
            defect_probability: info.defect_probability,
            cell_type: info.cell_type,
            split: None,
        });
    }
    let mut f = std::fs::File::create(&manifest_path).map_err(TrainError::io(&manifest_path))?;
    f.write_all(manifest.as_bytes()).map_err(TrainError::io(&manifest_path))?;
    Ok(records)
}
