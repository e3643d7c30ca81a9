//! Procedural stand-ins for the four pipeline modalities, with a class
//! signal of adjustable strength confined to a central region.
//!
//! Styles: branching vessel texture with a dark central zone (OCTA-SMAC),
//! layered horizontal bands with a foveal pit (OCT-BMAC) or an optic cup
//! (OCT-BONH), and a circular fundus field with disc, vessel arcades and a
//! dark macula (FAF). Positive cases enlarge the central dark zone, thicken
//! the top band centrally, or darken the macula.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataman::{
    DatasetManifest, Image, ImageRecord, Label, MetadataRecord, Modality, Provenance, Sex,
};
use crate::error::{bail_input, Error, Result};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub side: usize,
    pub modalities: Vec<Modality>,
    /// 0 gives identical POS/NEG distributions; 1 is the full perturbation.
    pub class_signal_strength: f64,
    /// Shift of the age distribution between classes, in units of 8 years.
    pub metadata_signal: f64,
    pub n_families: usize,
    pub eyes_per_family: usize,
    pub positive_fraction: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            side: 64,
            modalities: Modality::PIPELINE.to_vec(),
            class_signal_strength: 1.0,
            metadata_signal: 0.0,
            n_families: 50,
            eyes_per_family: 2,
            positive_fraction: 0.4,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side < 32 {
            bail_input!("phantom side must be at least 32, got {}", self.side);
        }
        if self.n_families < 4 {
            bail_input!("need at least 4 families, got {}", self.n_families);
        }
        if self.eyes_per_family == 0 {
            bail_input!("eyes_per_family must be positive");
        }
        if !(0.0..=1.0).contains(&self.class_signal_strength) {
            bail_input!("class_signal_strength must lie in [0,1]");
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            bail_input!("positive_fraction must lie in [0,1]");
        }
        if self.modalities.is_empty() {
            bail_input!("no modalities configured");
        }
        for m in &self.modalities {
            style_of(*m)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Style {
    Vessels,
    Macula,
    Disc,
    Fundus,
}

fn style_of(m: Modality) -> Result<Style> {
    Ok(match m {
        Modality::OctaSmac => Style::Vessels,
        Modality::OctBmac => Style::Macula,
        Modality::OctBonh => Style::Disc,
        Modality::Faf => Style::Fundus,
        other => bail_input!("no phantom style for modality {other}"),
    })
}

/// Normalised coordinates in [-1, 1] of a pixel centre.
fn coord(i: usize, side: usize) -> f64 {
    (i as f64 + 0.5) / side as f64 * 2.0 - 1.0
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn gauss(x: f64, sigma: f64) -> f64 {
    (-x * x / (2.0 * sigma * sigma)).exp()
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Which pixels the class perturbation can touch.
pub fn signal_mask(modality: Modality, side: usize) -> Result<Vec<bool>> {
    let style = style_of(modality)?;
    let mut mask = Vec::with_capacity(side * side);
    for y in 0..side {
        let v = coord(y, side);
        for x in 0..side {
            let u = coord(x, side);
            mask.push(match style {
                Style::Vessels | Style::Fundus => (u * u + v * v).sqrt() < 0.4,
                Style::Macula | Style::Disc => u.abs() < 0.3 && (-0.75..0.1).contains(&v),
            });
        }
    }
    Ok(mask)
}

/// Mean of the first channel over the masked pixels.
pub fn region_mean(image: &Image, mask: &[bool]) -> f64 {
    let plane = image.plane(0);
    let (sum, n) = plane
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
    sum / n.max(1) as f64
}

struct Canvas {
    side: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn new(side: usize) -> Self {
        Self {
            side,
            data: vec![0.0; side * side],
        }
    }

    fn to_px(&self, c: f64) -> f64 {
        (c + 1.0) * 0.5 * self.side as f64 - 0.5
    }

    /// Max-blends a Gaussian-profile stroke along the segment `a`–`b`
    /// (normalised coordinates, `width` is the profile sigma).
    fn stroke(&mut self, a: (f64, f64), b: (f64, f64), width: f64, value: f64) {
        let s = self.side as f64 * 0.5;
        let (ax, ay, bx, by) = (self.to_px(a.0), self.to_px(a.1), self.to_px(b.0), self.to_px(b.1));
        let w = (width * s).max(0.35);
        let reach = 3.0 * w;
        let x0 = (ax.min(bx) - reach).floor().max(0.0) as usize;
        let x1 = ((ax.max(bx) + reach).ceil() as isize).clamp(0, self.side as isize - 1) as usize;
        let y0 = (ay.min(by) - reach).floor().max(0.0) as usize;
        let y1 = ((ay.max(by) + reach).ceil() as isize).clamp(0, self.side as isize - 1) as usize;
        if ax.max(bx) + reach < 0.0 || ay.max(by) + reach < 0.0 {
            return;
        }
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = (dx * dx + dy * dy).max(1e-12);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64 - ax, y as f64 - ay);
                let t = ((px * dx + py * dy) / len2).clamp(0.0, 1.0);
                let (ex, ey) = (px - t * dx, py - t * dy);
                let v = value * gauss((ex * ex + ey * ey).sqrt(), w);
                let cell = &mut self.data[y * self.side + x];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
}

/// Grows a branching tree of strokes from the given seeds.
struct Walker {
    pos: (f64, f64),
    heading: f64,
    width: f64,
    length: f64,
}

fn grow_tree<R: Rng + ?Sized>(
    canvas: &mut Canvas,
    mut walkers: Vec<Walker>,
    rng: &mut R,
    steer: impl Fn((f64, f64), f64) -> f64,
    value: f64,
) {
    let step = 0.03;
    let mut budget = 6000usize;
    while let Some(mut w) = walkers.pop() {
        while w.length > 0.0 && w.width > 0.006 && budget > 0 {
            budget -= 1;
            w.heading += 0.22 * normal(rng) + steer(w.pos, w.heading);
            let next = (w.pos.0 + step * w.heading.cos(), w.pos.1 + step * w.heading.sin());
            canvas.stroke(w.pos, next, w.width, value);
            w.pos = next;
            w.length -= step;
            w.width *= 0.993;
            if w.pos.0.abs() > 1.3 || w.pos.1.abs() > 1.3 {
                break;
            }
            if rng.random::<f64>() < 0.07 {
                let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                walkers.push(Walker {
                    pos: w.pos,
                    heading: w.heading + side * rng.random_range(0.4..0.9),
                    width: w.width * 0.7,
                    length: w.length * 0.6,
                });
            }
        }
    }
}

/// White noise box-blurred with the given pixel radius, scaled to unit sd.
fn smooth_noise<R: Rng + ?Sized>(side: usize, radius: usize, rng: &mut R) -> Vec<f64> {
    let mut a: Vec<f64> = (0..side * side).map(|_| normal(rng)).collect();
    let mut b = vec![0.0; side * side];
    for pass in 0..2 {
        for y in 0..side {
            for x in 0..side {
                let mut s = 0.0;
                let mut n = 0.0;
                for d in -(radius as isize)..=radius as isize {
                    let (xx, yy) = if pass == 0 { (x as isize + d, y as isize) } else { (x as isize, y as isize + d) };
                    if (0..side as isize).contains(&xx) && (0..side as isize).contains(&yy) {
                        s += a[yy as usize * side + xx as usize];
                        n += 1.0;
                    }
                }
                b[y * side + x] = s / n;
            }
        }
        std::mem::swap(&mut a, &mut b);
    }
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    let sd = (a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.len() as f64).sqrt().max(1e-12);
    a.iter().map(|v| (v - mean) / sd).collect()
}

fn render_vessels<R: Rng + ?Sized>(side: usize, signal: f64, rng: &mut R) -> Vec<f64> {
    let mut canvas = Canvas::new(side);
    let trunks = 10;
    let walkers = (0..trunks)
        .map(|i| {
            let theta = 2.0 * PI * i as f64 / trunks as f64 + rng.random_range(-0.2..0.2);
            Walker {
                pos: (1.25 * theta.cos(), 1.25 * theta.sin()),
                heading: theta + PI + rng.random_range(-0.3..0.3),
                width: rng.random_range(0.025..0.04),
                length: 2.0,
            }
        })
        .collect();
    // Gentle pull towards the centre.
    let steer = |p: (f64, f64), h: f64| {
        let target = (-p.1).atan2(-p.0);
        let mut d = target - h;
        while d > PI {
            d -= 2.0 * PI;
        }
        while d < -PI {
            d += 2.0 * PI;
        }
        0.06 * d
    };
    grow_tree(&mut canvas, walkers, rng, steer, 0.9);
    let capillaries = smooth_noise(side, (side / 48).max(1), rng);
    let radius = rng.random_range(0.12..0.18) + 0.15 * signal;
    let background = rng.random_range(0.05..0.08);
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let v = coord(y, side);
        for x in 0..side {
            let u = coord(x, side);
            let i = y * side + x;
            let cap = (0.28 + 0.1 * capillaries[i]).clamp(0.0, 1.0);
            let zone = smoothstep(radius - 0.03, radius + 0.03, (u * u + v * v).sqrt());
            out.push(background + zone * canvas.data[i].max(cap) + 0.03 * normal(rng));
        }
    }
    out
}

/// Retinal layers from the vitreous down: (thickness, intensity) per layer.
const LAYERS: [(f64, f64); 8] = [
    (0.05, 0.80), // nerve fibre
    (0.08, 0.45),
    (0.05, 0.60),
    (0.06, 0.30),
    (0.04, 0.55),
    (0.12, 0.22),
    (0.05, 0.95), // pigment epithelium
    (0.20, 0.50), // choroid
];

fn render_bands<R: Rng + ?Sized>(side: usize, signal: f64, cup: bool, rng: &mut R) -> Vec<f64> {
    let base = rng.random_range(-0.04..0.04);
    let tilt = rng.random_range(-0.05..0.05);
    let curve = rng.random_range(0.0..0.1);
    let gains: Vec<f64> = LAYERS.iter().map(|_| 1.0 + 0.04 * normal(rng)).collect();
    let vitreous = rng.random_range(0.14..0.18);
    let deep = rng.random_range(0.18..0.22);
    let mut out = Vec::with_capacity(side * side);
    let columns: Vec<(Vec<f64>, bool)> = (0..side)
        .map(|x| {
            let u = coord(x, side);
            // Top of the pigment epithelium; inner layers stack upwards from it.
            let rpe_top = base + tilt * u + curve * u * u;
            let centre = gauss(u, 0.1);
            let canal = cup && u.abs() < 0.12;
            let mut thick: Vec<f64> = LAYERS.iter().map(|l| l.0).collect();
            if cup {
                thick[0] += 0.08 * gauss(u.abs() - 0.2, 0.08);
                let keep = smoothstep(0.1, 0.2, u.abs());
                for t in thick.iter_mut().take(6) {
                    *t *= keep;
                }
            } else {
                for t in thick.iter_mut().take(5) {
                    *t *= 1.0 - 0.85 * centre;
                }
            }
            thick[0] += signal * if cup { 0.16 * gauss(u, 0.25) * smoothstep(0.1, 0.2, u.abs()) } else { 0.10 * gauss(u, 0.22) };
            let inner: f64 = thick[..6].iter().sum();
            let mut bounds = Vec::with_capacity(LAYERS.len() + 1);
            let mut b = rpe_top - inner;
            bounds.push(b);
            for t in &thick {
                b += t;
                bounds.push(b);
            }
            (bounds, canal)
        })
        .collect();
    for y in 0..side {
        let v = coord(y, side);
        for (x, (bounds, canal)) in columns.iter().enumerate() {
            let mut val = if v < bounds[0] { vitreous } else { deep };
            for (j, w) in bounds.windows(2).enumerate() {
                if v >= w[0] && v < w[1] {
                    val = LAYERS[j].1 * gains[j];
                }
            }
            if *canal && v >= bounds[6] {
                val = 0.12 + 0.04 * (coord(x, side) * 40.0).sin().abs();
            }
            let speckle = (1.0 + 0.25 * normal(rng)).max(0.0);
            out.push(val * speckle + 0.02 * normal(rng));
        }
    }
    out
}

fn render_fundus<R: Rng + ?Sized>(side: usize, signal: f64, rng: &mut R) -> Vec<f64> {
    let disc_side = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let disc = (0.58 * disc_side, rng.random_range(-0.05..0.05));
    let mut canvas = Canvas::new(side);
    let walkers = [-1.0f64, 1.0]
        .iter()
        .flat_map(|&vert| {
            [0.8, 1.2].map(|spread| Walker {
                pos: disc,
                heading: (vert * spread).atan2(-disc_side) + rng.random_range(-0.15..0.15),
                width: rng.random_range(0.025..0.035),
                length: 1.6,
            })
        })
        .collect();
    // Arcades bend around the macula.
    let steer = move |p: (f64, f64), h: f64| {
        let r = (p.0 * p.0 + p.1 * p.1).sqrt();
        if r < 0.45 {
            let away = p.1.atan2(p.0);
            let mut d = away - h;
            while d > PI {
                d -= 2.0 * PI;
            }
            while d < -PI {
                d += 2.0 * PI;
            }
            0.12 * d
        } else {
            0.0
        }
    };
    grow_tree(&mut canvas, walkers, rng, steer, 1.0);
    let texture = smooth_noise(side, (side / 12).max(1), rng);
    let gain = rng.random_range(0.95..1.05);
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let v = coord(y, side);
        for x in 0..side {
            let u = coord(x, side);
            let r = (u * u + v * v).sqrt();
            if r > 0.95 {
                out.push(0.0);
                continue;
            }
            let i = y * side + x;
            let mut val = 0.42 + 0.03 * texture[i] - 0.18 * gauss(r, 0.16);
            let dd = ((u - disc.0).powi(2) + (v - disc.1).powi(2)).sqrt();
            val = val * smoothstep(0.09, 0.12, dd) + 0.08 * (1.0 - smoothstep(0.09, 0.12, dd));
            val *= 1.0 - 0.6 * canvas.data[i];
            val *= 1.0 - 0.55 * signal * gauss(r, 0.14);
            out.push(val * gain + 0.025 * normal(rng));
        }
    }
    out
}

/// Renders one single-channel phantom. `signal` is the class perturbation
/// (class strength for POS images, 0 otherwise).
pub fn render_phantom<R: Rng + ?Sized>(modality: Modality, side: usize, signal: f64, rng: &mut R) -> Result<Image> {
    if side < 32 {
        bail_input!("phantom side must be at least 32, got {side}");
    }
    let raw = match style_of(modality)? {
        Style::Vessels => render_vessels(side, signal, rng),
        Style::Macula => render_bands(side, signal, false, rng),
        Style::Disc => render_bands(side, signal, true, rng),
        Style::Fundus => render_fundus(side, signal, rng),
    };
    Image::new(1, side, side, raw.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect())
}

/// Identity, label and (optionally) metadata of every phantom eye, before
/// any pixels are rendered.
pub fn plan_records(config: &PhantomConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let mut rng = seeded(derive_seed(config.seed, "phantom-plan"));
    let patients_per_family = config.eyes_per_family.div_ceil(2);
    let n_patients = config.n_families * patients_per_family;
    let n_pos = (config.positive_fraction * n_patients as f64).round() as usize;
    let mut labels: Vec<Label> = (0..n_patients)
        .map(|i| if i < n_pos { Label::Pos } else { Label::Neg })
        .collect();
    labels.shuffle(&mut rng);

    let mut manifest = DatasetManifest::new(".");
    for f in 0..config.n_families {
        let family = format!("F{f:03}");
        for e in 0..config.eyes_per_family {
            let pi = e / 2;
            let patient = format!("{family}P{pi}");
            let label = labels[f * patients_per_family + pi];
            if e % 2 == 0 {
                let shift = config.metadata_signal * 8.0 * if label == Label::Pos { 1.0 } else { -1.0 };
                let age = (68.0 + 7.0 * normal(&mut rng) + shift).clamp(40.0, 95.0);
                let sex = if rng.random::<bool>() { Sex::Female } else { Sex::Male };
                manifest.metadata.insert(patient.clone(), MetadataRecord::new(age, sex)?);
            }
            let eye = format!("{patient}{}", if e % 2 == 0 { "L" } else { "R" });
            for &m in &config.modalities {
                manifest.records.push(ImageRecord {
                    path: format!("images/{}/{eye}.png", m.tag()),
                    family_id: family.clone(),
                    patient_id: patient.clone(),
                    eye_id: eye.clone(),
                    modality: m,
                    label,
                    provenance: Provenance::Real,
                });
            }
        }
    }
    Ok(manifest)
}

/// Renders the image for one planned record.
pub fn render_record(config: &PhantomConfig, record: &ImageRecord) -> Result<Image> {
    let signal = if record.label == Label::Pos { config.class_signal_strength } else { 0.0 };
    let mut rng = seeded(derive_seed(config.seed, &format!("{}/{}", record.eye_id, record.modality)));
    render_phantom(record.modality, config.side, signal, &mut rng)
}

/// Writes PNGs, `manifest.tsv` and `metadata.tsv` under `out_dir`.
pub fn generate_phantoms(config: &PhantomConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let mut manifest = plan_records(config)?;
    manifest.base_dir = out_dir.to_path_buf();
    for m in &config.modalities {
        let dir = out_dir.join("images").join(m.tag());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    manifest
        .records
        .par_iter()
        .try_for_each(|r| render_record(config, r)?.save_png(&manifest.resolve(r)))?;
    manifest.write_dir(out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::{ks_two_sample, roc_pr_areas};

    fn stats(m: Modality, strength: f64, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mask = signal_mask(m, 64).unwrap();
        let mut rng = seeded(seed);
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for _ in 0..n {
            pos.push(region_mean(&render_phantom(m, 64, strength, &mut rng).unwrap(), &mask));
            neg.push(region_mean(&render_phantom(m, 64, 0.0, &mut rng).unwrap(), &mask));
        }
        (pos, neg)
    }

    #[test]
    fn zero_strength_is_indistinguishable() {
        for m in Modality::PIPELINE {
            let (pos, neg) = stats(m, 0.0, 100, 11);
            let ks = ks_two_sample(&pos, &neg).unwrap();
            assert!(ks.p_value > 0.01, "{m}: p = {}", ks.p_value);
        }
    }

    #[test]
    fn full_strength_is_linearly_separable_in_signal_region() {
        for m in Modality::PIPELINE {
            let (pos, neg) = stats(m, 1.0, 100, 12);
            let scores: Vec<f64> = pos.iter().chain(&neg).copied().collect();
            let labels: Vec<bool> = (0..200).map(|i| i < 100).collect();
            let auc = roc_pr_areas(&scores, &labels).unwrap().auroc;
            // The probe may point either way; both directions are linear.
            let auc = auc.max(1.0 - auc);
            assert!(auc > 0.9, "{m}: AUROC {auc}");
        }
    }

    #[test]
    fn counting_and_invariants() {
        let config = PhantomConfig {
            n_families: 4,
            eyes_per_family: 2,
            ..Default::default()
        };
        let manifest = plan_records(&config).unwrap();
        let eyes: std::collections::BTreeSet<_> = manifest.records.iter().map(|r| &r.eye_id).collect();
        let families: std::collections::BTreeSet<_> = manifest.records.iter().map(|r| &r.family_id).collect();
        assert_eq!(eyes.len(), 8);
        assert_eq!(families.len(), 4);
        assert_eq!(manifest.records.len(), 8 * 4);
        for m in Modality::PIPELINE {
            assert_eq!(manifest.records.iter().filter(|r| r.modality == m).count(), 8);
        }
        manifest.validate(false).unwrap();
        manifest.validate_classifier_collection().unwrap();
    }

    #[test]
    fn writes_files_deterministically() {
        let config = PhantomConfig {
            n_families: 4,
            eyes_per_family: 1,
            side: 32,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_phantoms(&config, a.path()).unwrap();
        generate_phantoms(&config, b.path()).unwrap();
        ma.validate(true).unwrap();
        let back = DatasetManifest::read_dir(a.path()).unwrap();
        assert_eq!(back.records, ma.records);
        for r in &ma.records {
            let x = fs::read(a.path().join(&r.path)).unwrap();
            let y = fs::read(b.path().join(&r.path)).unwrap();
            assert_eq!(x, y);
            let img = Image::load_png(&a.path().join(&r.path)).unwrap();
            assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn band_and_vessel_styles_differ_in_row_profile() {
        // Variance of row means over variance of column means.
        let anisotropy = |img: &Image| {
            let w = img.width;
            let px: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
            let var = |v: Vec<f64>| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
            };
            let rows = var(px.chunks(w).map(|r| r.iter().sum::<f64>() / w as f64).collect());
            let cols = var((0..w).map(|x| px.iter().skip(x).step_by(w).sum::<f64>() / w as f64).collect());
            rows / cols
        };
        let mut rng = seeded(3);
        for _ in 0..10 {
            let bands = anisotropy(&render_phantom(Modality::OctBmac, 64, 0.0, &mut rng).unwrap());
            let vessels = anisotropy(&render_phantom(Modality::OctaSmac, 64, 0.0, &mut rng).unwrap());
            assert!(bands > 5.0 * vessels, "{bands} vs {vessels}");
        }
    }

    #[test]
    fn rejects_unsupported_inputs() {
        assert!(render_phantom(Modality::Col, 64, 0.0, &mut seeded(0)).is_err());
        assert!(render_phantom(Modality::Faf, 16, 0.0, &mut seeded(0)).is_err());
        let bad = PhantomConfig {
            n_families: 3,
            ..Default::default()
        };
        assert!(plan_records(&bad).is_err());
    }
}
