//! Labeled image datasets, the planted-feature generator, and the on-disk
//! manifest format.
//!
//! A dataset directory holds `manifest.json`, a little-endian `f32` image blob
//! and a little-endian `i32` label blob. The manifest carries shapes, the
//! class count, provenance and a SHA-256 over both blobs.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Natural,
    Robust,
    NonRobust,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Natural => "natural",
            DatasetKind::Robust => "robust",
            DatasetKind::NonRobust => "non-robust",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: DatasetKind,
    pub source_encoder: Option<String>,
    pub distill_config: Option<String>,
}

impl Provenance {
    pub fn natural() -> Self {
        Self { kind: DatasetKind::Natural, source_encoder: None, distill_config: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Vec<f32>,
    labels: Vec<u32>,
    shape: [usize; 3],
    num_classes: usize,
    provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<u32>,
        shape: [usize; 3],
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 {
            return Err(Error::InvalidConfig(format!("image shape {:?} has a zero dimension", shape)));
        }
        if images.len() != labels.len() * per {
            return Err(Error::ShapeMismatch {
                context: "dataset".into(),
                expected: format!("{} pixels for {} labels", labels.len() * per, labels.len()),
                found: format!("{} pixels", images.len()),
            });
        }
        if let Some(bad) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!("pixel value {bad} outside [0,1]")));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidConfig(format!("label {bad} not below class count {num_classes}")));
        }
        Ok(Self { images, labels, shape, num_classes, provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn pixels_per_image(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label_vec(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.pixels_per_image();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Images `idx` as an `[n, C, H, W]` tensor.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let p = self.pixels_per_image();
        let mut data = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            data.extend(self.image(i).iter().map(|&v| v as f64));
        }
        let [c, h, w] = self.shape;
        Tensor::new(vec![idx.len(), c, h, w], data)
    }

    pub fn all_images(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// The records at `idx`, keeping provenance.
    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        let p = self.pixels_per_image();
        let mut images = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        LabeledDataset {
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        }
    }

    fn image_bytes(&self) -> Vec<u8> {
        self.images.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn label_bytes(&self) -> Vec<u8> {
        self.labels.iter().flat_map(|&v| (v as i32).to_le_bytes()).collect()
    }

    /// Hex SHA-256 over the image blob followed by the label blob.
    pub fn digest(&self) -> String {
        payload_digest(&self.image_bytes(), &self.label_bytes())
    }
}

fn payload_digest(images: &[u8], labels: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(images);
    h.update(labels);
    hex::encode(h.finalize())
}

/// Parameters of the planted two-feature generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub n_per_class: usize,
    pub num_classes: usize,
    pub shape: [usize; 3],
    /// Background intensity shared by every class.
    pub base: f64,
    /// Brightness offset of the class region.
    pub robust_amplitude: f64,
    /// Per-sample Gaussian spread of the robust offset (0 = fixed template).
    #[serde(default)]
    pub robust_jitter: f64,
    /// Checkerboard amplitude `a`.
    pub nonrobust_amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            num_classes: 2,
            shape: [1, 8, 8],
            base: 0.3,
            robust_amplitude: 0.4,
            robust_jitter: 0.0,
            nonrobust_amplitude: 0.05,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// Region masks in class order: top, bottom, left, right, and the two diagonal quadrant pairs.
fn region_contains(region: usize, y: usize, x: usize, h: usize, w: usize) -> bool {
    let top = y < h / 2;
    let left = x < w / 2;
    match region % 6 {
        0 => top,
        1 => !top,
        2 => left,
        3 => !left,
        4 => top == left,
        _ => top != left,
    }
}

impl PlantedSpec {
    /// 2 classes of 1000 8x8 images with a weak checkerboard and a jittered half-image offset.
    pub fn desk(seed: u64) -> Self {
        Self {
            n_per_class: 1000,
            robust_amplitude: 0.25,
            robust_jitter: 0.25,
            nonrobust_amplitude: 0.02,
            noise_std: 0.05,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.shape;
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if c == 0 || h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidConfig(format!("image dimensions {:?} must be positive with even H and W", self.shape)));
        }
        if self.n_per_class == 0 {
            return Err(Error::InvalidConfig("n_per_class must be positive".into()));
        }
        if !(self.nonrobust_amplitude >= 0.0 && self.nonrobust_amplitude < self.robust_amplitude) {
            return Err(Error::InvalidConfig(format!(
                "non-robust amplitude {} must be non-negative and strictly below robust amplitude {}",
                self.nonrobust_amplitude, self.robust_amplitude
            )));
        }
        if self.noise_std < 0.0 || self.robust_jitter < 0.0 {
            return Err(Error::InvalidConfig("noise levels must be non-negative".into()));
        }
        for k in 0..self.num_classes {
            for j in 0..self.num_classes {
                let ip: f64 = self.robust_template(k).iter().zip(self.nonrobust_template(j)).map(|(a, b)| a * b).sum();
                if ip.abs() >= 1e-6 {
                    return Err(Error::InvalidConfig(format!(
                        "templates for classes {k}/{j} are not orthogonal at shape {:?} (inner product {ip})",
                        self.shape
                    )));
                }
            }
        }
        Ok(())
    }

    /// Class-`k` region mask (1 inside the bright half, 0 elsewhere).
    pub fn region_mask(&self, k: usize) -> Vec<f64> {
        let [c, h, w] = self.shape;
        let mut out = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.push(if region_contains(k, y, x, h, w) { 1.0 } else { 0.0 });
                }
            }
        }
        out
    }

    /// Zero-mean part of the class-`k` robust template (region offset only).
    pub fn robust_template(&self, k: usize) -> Vec<f64> {
        self.region_mask(k).into_iter().map(|m| self.robust_amplitude * m).collect()
    }

    /// Class-`k` checkerboard: `a * (-1)^(y+x)` with a per-class row sign pattern.
    /// Classes 0 and 1 are exact phase shifts of each other.
    pub fn nonrobust_template(&self, k: usize) -> Vec<f64> {
        let [c, h, w] = self.shape;
        let a = self.nonrobust_amplitude;
        let mut out = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            for y in 0..h {
                let walsh = ((k / 2) & y).count_ones() as usize;
                let sign_row = if (k + walsh) % 2 == 0 { 1.0 } else { -1.0 };
                for x in 0..w {
                    let cb = if (y + x) % 2 == 0 { 1.0 } else { -1.0 };
                    out.push(a * cb * sign_row);
                }
            }
        }
        out
    }
}

/// Samples `n_per_class * K` images, class `i % K` at position `i`.
pub fn generate_planted(spec: &PlantedSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let k = spec.num_classes;
    let masks: Vec<Vec<f64>> = (0..k).map(|c| spec.region_mask(c)).collect();
    let nonrobust: Vec<Vec<f64>> = (0..k).map(|c| spec.nonrobust_template(c)).collect();
    let n = spec.n_per_class * k;
    let per: usize = spec.shape.iter().product();
    let mut r = rng::rng(spec.seed);
    let mut images = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let jitter: f64 = r.sample(StandardNormal);
        let amp = spec.robust_amplitude + spec.robust_jitter * jitter;
        for p in 0..per {
            let z: f64 = r.sample(StandardNormal);
            let v = spec.base + amp * masks[class][p] + nonrobust[class][p] + spec.noise_std * z;
            images.push(v.clamp(0.0, 1.0) as f32);
        }
        labels.push(class as u32);
    }
    LabeledDataset::new(images, labels, spec.shape, k, Provenance::natural())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub k: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub dtype: String,
    pub images_file: String,
    pub labels_file: String,
    pub provenance: Provenance,
    pub sha256: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `manifest.json`, `images.bin` and `labels.bin` into `dir`.
pub fn save_dataset(d: &LabeledDataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let images = d.image_bytes();
    let labels = d.label_bytes();
    let [c, h, w] = d.shape;
    let manifest = Manifest {
        n: d.len(),
        k: d.num_classes,
        c,
        h,
        w,
        dtype: "f32".into(),
        images_file: "images.bin".into(),
        labels_file: "labels.bin".into(),
        provenance: d.provenance.clone(),
        sha256: payload_digest(&images, &labels),
    };
    let ip = dir.join(&manifest.images_file);
    fs::write(&ip, &images).map_err(io_err(&ip))?;
    let lp = dir.join(&manifest.labels_file);
    fs::write(&lp, &labels).map_err(io_err(&lp))?;
    let mp = dir.join(MANIFEST_FILE);
    fs::write(&mp, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&mp))?;
    Ok(manifest)
}

/// Loads a dataset directory written by [`save_dataset`]; `path` may name the
/// directory or its manifest file.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let (dir, mp) = if path.is_dir() { (path.to_path_buf(), path.join(MANIFEST_FILE)) } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let text = fs::read_to_string(&mp).map_err(io_err(&mp))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptManifest { path: mp.clone(), reason: e.to_string() })?;
    if m.dtype != "f32" {
        return Err(Error::CorruptManifest { path: mp, reason: format!("unsupported dtype {}", m.dtype) });
    }
    let ip = dir.join(&m.images_file);
    let images = fs::read(&ip).map_err(io_err(&ip))?;
    let lp = dir.join(&m.labels_file);
    let labels = fs::read(&lp).map_err(io_err(&lp))?;
    if labels.len() % 4 != 0 || labels.len() / 4 != m.n {
        return Err(Error::ManifestMismatch {
            field: "n".into(),
            manifest: m.n.to_string(),
            payload: format!("{} labels", labels.len() as f64 / 4.0),
        });
    }
    let per = m.c * m.h * m.w;
    if per == 0 || images.len() % 4 != 0 || images.len() / 4 % per != 0 {
        return Err(Error::ManifestMismatch {
            field: "c,h,w".into(),
            manifest: format!("{}x{}x{}", m.c, m.h, m.w),
            payload: format!("{} floats", images.len() / 4),
        });
    }
    if images.len() / 4 / per != m.n {
        return Err(Error::ManifestMismatch {
            field: "n".into(),
            manifest: m.n.to_string(),
            payload: format!("{} images", images.len() / 4 / per),
        });
    }
    if payload_digest(&images, &labels) != m.sha256 {
        return Err(Error::Checksum { path: dir });
    }
    let img: Vec<f32> = images.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let mut lab = Vec::with_capacity(m.n);
    for b in labels.chunks_exact(4) {
        let v = i32::from_le_bytes(b.try_into().unwrap());
        if v < 0 {
            return Err(Error::CorruptManifest { path: mp, reason: format!("negative label {v}") });
        }
        lab.push(v as u32);
    }
    LabeledDataset::new(img, lab, [m.c, m.h, m.w], m.k, m.provenance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> PlantedSpec {
        PlantedSpec { n_per_class: 10, seed, ..PlantedSpec::default() }
    }

    #[test]
    fn zero_amplitude_zero_noise_gives_pure_robust_templates() {
        let spec = PlantedSpec { nonrobust_amplitude: 0.0, noise_std: 0.0, ..small(1) };
        let d = generate_planted(&spec).unwrap();
        for i in 0..d.len() {
            let expect: Vec<f32> = spec
                .robust_template(d.labels()[i] as usize)
                .iter()
                .map(|v| (spec.base + v) as f32)
                .collect();
            assert_eq!(d.image(i), expect.as_slice());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_planted(&small(7)).unwrap();
        let b = generate_planted(&small(7)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_planted(&small(8)).unwrap());
    }

    #[test]
    fn templates_are_orthogonal_for_many_classes() {
        let spec = PlantedSpec { num_classes: 10, ..small(0) };
        spec.validate().unwrap();
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_planted(&PlantedSpec { num_classes: 1, ..small(0) }).is_err());
        assert!(generate_planted(&PlantedSpec { shape: [1, 7, 8], ..small(0) }).is_err());
        assert!(generate_planted(&PlantedSpec { nonrobust_amplitude: 0.5, ..small(0) }).is_err());
    }

    #[test]
    fn large_noise_stays_in_unit_box() {
        let d = generate_planted(&PlantedSpec { noise_std: 5.0, ..small(3) }).unwrap();
        assert!(d.images().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn removing_the_checkerboard_moves_pixels_by_at_most_a() {
        let spec = PlantedSpec { noise_std: 0.0, ..small(2) };
        let d = generate_planted(&spec).unwrap();
        for i in 0..d.len() {
            let y = d.labels()[i] as usize;
            let nr = spec.nonrobust_template(y);
            for (p, v) in d.image(i).iter().enumerate() {
                let stripped = *v as f64 - nr[p];
                assert!((stripped - *v as f64).abs() <= spec.nonrobust_amplitude + 1e-12);
                // the stripped image is the pure robust template of the same class
                let r = spec.base + spec.robust_template(y)[p];
                assert!((stripped - r).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constructor_rejects_out_of_range_values() {
        assert!(LabeledDataset::new(vec![1.5], vec![0], [1, 1, 1], 2, Provenance::natural()).is_err());
        assert!(LabeledDataset::new(vec![0.5], vec![2], [1, 1, 1], 2, Provenance::natural()).is_err());
        assert!(LabeledDataset::new(vec![0.5, 0.5], vec![0], [1, 1, 1], 2, Provenance::natural()).is_err());
    }
}
