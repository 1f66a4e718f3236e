//! Synthetic lesion-segmentation data and the on-disk dataset format.
//!
//! A split directory holds `manifest.json` plus one tensor file pair per image
//! (`image_00000.bin/.json`, shape `[1, H, W]`) and mask (`mask_00000.*`).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Images and binary masks, each `[C, H, W]` / `[1, H, W]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub masks: Vec<Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the selected samples into `[B, C, H, W]` image and mask batches.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        stack(indices.iter().map(|&i| &self.images[i]), indices.len())
            .and_then(|x| Ok((x, stack(indices.iter().map(|&i| &self.masks[i]), indices.len())?)))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            masks: indices.iter().map(|&i| self.masks[i].clone()).collect(),
        }
    }
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack<'a>(items: impl Iterator<Item = &'a Tensor>, count: usize) -> Result<Tensor> {
    let mut shape = None;
    let mut data = Vec::new();
    for t in items {
        match &shape {
            None => shape = Some(t.shape().to_vec()),
            Some(s) if s != t.shape() => {
                return Err(Error::Shape(format!("cannot stack {:?} with {s:?}", t.shape())));
            }
            _ => {}
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![count];
    full.extend(shape.ok_or_else(|| invalid!("cannot stack zero tensors"))?);
    Tensor::new(full, data)
}

/// Generator settings for the synthetic lesion task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDataConfig {
    pub image_size: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    /// Inclusive range of lesions per image.
    pub lesion_count_range: [usize; 2],
    /// Range of ellipse semi-axes in pixels.
    pub lesion_radius_range: [f64; 2],
    /// Peak intensity added inside a lesion.
    pub lesion_contrast: f64,
    /// Standard deviation of the smoothed background texture.
    pub background_noise_sigma: f64,
    pub background_level: f64,
    /// Gaussian blur applied to the white background noise, in pixels.
    pub smoothing_sigma: f64,
    /// Width of the lesion intensity ramp across the boundary, in pixels.
    pub edge_softness: f64,
    pub seed: u64,
}

impl Default for SyntheticDataConfig {
    fn default() -> Self {
        SyntheticDataConfig {
            image_size: 64,
            num_train: 200,
            num_val: 50,
            num_test: 50,
            lesion_count_range: [1, 4],
            lesion_radius_range: [3.0, 10.0],
            lesion_contrast: 0.35,
            background_noise_sigma: 0.08,
            background_level: 0.35,
            smoothing_sigma: 1.5,
            edge_softness: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticDataConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.lesion_radius_range;
        let [cmin, cmax] = self.lesion_count_range;
        if self.image_size < 8 {
            return Err(invalid!("image_size must be at least 8"));
        }
        if !(lo > 0.0 && lo <= hi && hi < self.image_size as f64 / 2.0) {
            return Err(invalid!("lesion radii {lo}..{hi} must be positive and below image_size/2"));
        }
        if cmin == 0 || cmin > cmax {
            return Err(invalid!("lesion count range {cmin}..={cmax} must be non-empty and start at 1 or more"));
        }
        // Worst case area must stay under half the image.
        let worst = cmax as f64 * std::f64::consts::PI * hi * hi;
        if worst >= 0.5 * (self.image_size * self.image_size) as f64 {
            return Err(invalid!("lesions can cover half the image; reduce count or radius"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn count(self, cfg: &SyntheticDataConfig) -> usize {
        match self {
            Split::Train => cfg.num_train,
            Split::Val => cfg.num_val,
            Split::Test => cfg.num_test,
        }
    }
}

/// splitmix64 finalizer, used to give every sample an independent stream.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    mix(mix(mix(seed) ^ split as u64) ^ index as u64)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge clamping.
pub(crate) fn blur(field: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return field.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |i: isize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * field[y * n + clamp(x as isize + t as isize - r)])
                .sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * tmp[clamp(y as isize + t as isize - r) * n + x])
                .sum();
        }
    }
    out
}

/// One image/mask pair: smoothed noise plus soft-edged bright ellipses,
/// clamped to `[0, 1]` and rounded through `f32`.
pub fn synth_sample(cfg: &SyntheticDataConfig, seed: u64) -> (Tensor, Tensor) {
    let n = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut field = blur(&white, n, cfg.smoothing_sigma);
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / field.len() as f64).sqrt().max(1e-12);
    field.iter_mut().for_each(|v| *v = cfg.background_level + cfg.background_noise_sigma * (*v - mean) / std);

    let [cmin, cmax] = cfg.lesion_count_range;
    let [rlo, rhi] = cfg.lesion_radius_range;
    let count = rng.random_range(cmin..=cmax);
    let mut lesion = vec![0.0f64; n * n];
    let mut mask = vec![0.0f64; n * n];
    for _ in 0..count {
        let a = rng.random_range(rlo..=rhi);
        let b = rng.random_range(rlo..=rhi);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let margin = a.max(b);
        let cy = rng.random_range(margin..n as f64 - 1.0 - margin);
        let cx = rng.random_range(margin..n as f64 - 1.0 - margin);
        let (s, c) = theta.sin_cos();
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let rho = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
                let i = y * n + x;
                if rho <= 1.0 {
                    mask[i] = 1.0;
                }
                // Signed distance to the boundary, roughly in pixels.
                let dist = (1.0 - rho) * a.min(b);
                let profile = cfg.lesion_contrast / (1.0 + (-dist / cfg.edge_softness).exp());
                lesion[i] = lesion[i].max(profile);
            }
        }
    }
    let image: Vec<f64> = field
        .iter()
        .zip(&lesion)
        .map(|(b, l)| ((b + l).clamp(0.0, 1.0) as f32) as f64)
        .collect();
    (
        Tensor::new(vec![1, n, n], image).expect("image shape"),
        Tensor::new(vec![1, n, n], mask).expect("mask shape"),
    )
}

/// Generates one split in memory; deterministic in `cfg.seed`.
pub fn synth_split(cfg: &SyntheticDataConfig, split: Split) -> Result<Dataset> {
    cfg.validate()?;
    let pairs: Vec<(Tensor, Tensor)> = (0..split.count(cfg))
        .into_par_iter()
        .map(|i| synth_sample(cfg, sample_seed(cfg.seed, split, i)))
        .collect();
    let (images, masks) = pairs.into_iter().unzip();
    Ok(Dataset { images, masks })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

/// Describes one split directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub count: usize,
    /// `[C, H, W]` of every image.
    pub image_shape: Vec<usize>,
    pub channels: usize,
    pub samples: Vec<SampleEntry>,
    pub normalization: Normalization,
    pub config_hash: String,
}

/// Writes a dataset split to `dir` (created if needed).
pub fn write_dataset(dir: &Path, split: &str, data: &Dataset, config_hash: &str) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = data.images.first().ok_or_else(|| invalid!("cannot write an empty dataset"))?;
    let mut samples = Vec::with_capacity(data.len());
    for (i, (img, mask)) in data.images.iter().zip(&data.masks).enumerate() {
        let entry = SampleEntry {
            image: format!("image_{i:05}"),
            mask: format!("mask_{i:05}"),
        };
        write_tensor(&dir.join(&entry.image), img)?;
        write_tensor(&dir.join(&entry.mask), mask)?;
        samples.push(entry);
    }
    let all: Vec<f64> = data.images.iter().flat_map(|t| t.data().iter().copied()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
    let manifest = DatasetManifest {
        split: split.to_string(),
        count: data.len(),
        image_shape: first.shape().to_vec(),
        channels: first.shape()[0],
        samples,
        normalization: Normalization { mean, std },
        config_hash: config_hash.to_string(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Generates every split under `out/<split>/` and writes `out/config.json`.
pub fn gen_synthetic(cfg: &SyntheticDataConfig, out: &Path) -> Result<Vec<DatasetManifest>> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
    let hash = cfg.hash();
    let mut manifests = Vec::new();
    for split in Split::ALL {
        if split.count(cfg) == 0 {
            continue;
        }
        let data = synth_split(cfg, split)?;
        manifests.push(write_dataset(&out.join(split.name()), split.name(), &data, &hash)?);
    }
    Ok(manifests)
}

/// Loads one split directory, checking every file against the manifest.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    if !path.is_file() {
        return Err(Error::Dataset(format!("no manifest found in {}", dir.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.samples.len() != manifest.count {
        return Err(Error::Dataset(format!(
            "{}: count {} but {} samples listed",
            path.display(),
            manifest.count,
            manifest.samples.len()
        )));
    }
    let mask_shape: Vec<usize> = std::iter::once(1).chain(manifest.image_shape.iter().skip(1).copied()).collect();
    let load = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let stem: PathBuf = dir.join(name);
        let t = read_tensor(&stem).map_err(|e| Error::Dataset(format!("{name}: {e}")))?;
        if t.shape() != shape {
            return Err(Error::Dataset(format!(
                "{name}: shape {:?} does not match the manifest's {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    let mut data = Dataset::default();
    for entry in &manifest.samples {
        let image = load(&entry.image, &manifest.image_shape)?;
        let mask = load(&entry.mask, &mask_shape)?;
        if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Dataset(format!("{}: mask value {v} is not binary", entry.mask)));
        }
        data.images.push(image);
        data.masks.push(mask);
    }
    Ok(data)
}
