//! Image datasets: in-memory storage with a per-class index, loaders for the
//! CIFAR binary layout and for class-folder trees, a procedural generator for
//! desk-scale experiments, and the standard crop/flip augmentation.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::RandomStream;
use crate::tensor::Tensor;

/// Labelled images of one shape (channels × height × width) with values in
/// the declared normalized range of the source (`[0, 1]` for decoded
/// images).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    pixels: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    by_class: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn from_raw(shape: [usize; 3], pixels: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let per_image: usize = shape.iter().product();
        if per_image == 0 || pixels.len() != per_image * labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} pixel values do not form {} images of shape {shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &label) in labels.iter().enumerate() {
            let slot = by_class.get_mut(label).ok_or_else(|| {
                Error::InvalidDataset(format!("label {label} outside 0..{num_classes}"))
            })?;
            slot.push(i);
        }
        Ok(Self {
            shape,
            pixels,
            labels,
            num_classes,
            by_class,
        })
    }

    pub fn from_images(images: &[Tensor], labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidDataset("no images".into()))?;
        let shape: [usize; 3] = first
            .shape()
            .try_into()
            .map_err(|_| Error::InvalidDataset(format!("images must be 3-axis, got {:?}", first.shape())))?;
        if images.len() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let mut pixels = Vec::with_capacity(images.len() * first.numel());
        for img in images {
            img.ensure_shape(&shape)?;
            pixels.extend_from_slice(img.data());
        }
        Self::from_raw(shape, pixels, labels, num_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn image_data(&self, i: usize) -> &[f64] {
        let n: usize = self.shape.iter().product();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> Tensor {
        Tensor::new(self.shape.to_vec(), self.image_data(i).to_vec()).expect("stored image has declared shape")
    }

    pub fn class_members(&self, class: usize) -> Result<&[usize]> {
        self.by_class
            .get(class)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidDataset(format!("class {class} outside 0..{}", self.num_classes)))
    }

    /// Images `indices` stacked into an `n×c×h×w` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let n: usize = self.shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image_data(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.shape);
        Tensor::new(shape, data).expect("batch shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let pixels = self.batch(indices).into_data();
        Self::from_raw(self.shape, pixels, labels, self.num_classes)
    }

    /// The first `per_class` items of every class, in dataset order.
    pub fn balanced_prefix(&self, per_class: usize) -> Result<Self> {
        let mut indices: Vec<usize> = self
            .by_class
            .iter()
            .flat_map(|members| members.iter().take(per_class).copied())
            .collect();
        indices.sort_unstable();
        self.subset(&indices)
    }
}

/// Which source a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    /// Procedurally generated class patterns.
    Synthetic(SyntheticSpec),
    /// `data_batch_*.bin` / `test_batch.bin` in a directory.
    Cifar10 { dir: String },
    /// `train.bin` / `test.bin` in a directory, fine labels.
    Cifar100 { dir: String },
    /// `<dir>/train/<class>/*.png` and `<dir>/test/<class>/*.png`.
    Folder { dir: String },
}

/// Train and test split of one source.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl DatasetSource {
    pub fn load(&self) -> Result<Splits> {
        match self {
            DatasetSource::Synthetic(spec) => spec.generate(),
            DatasetSource::Cifar10 { dir } => {
                let dir = Path::new(dir);
                let train_files: Vec<_> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
                Ok(Splits {
                    train: load_cifar_binary(&train_files, 1, 0, 10)?,
                    test: load_cifar_binary(&[dir.join("test_batch.bin")], 1, 0, 10)?,
                })
            }
            DatasetSource::Cifar100 { dir } => {
                let dir = Path::new(dir);
                Ok(Splits {
                    train: load_cifar_binary(&[dir.join("train.bin")], 2, 1, 100)?,
                    test: load_cifar_binary(&[dir.join("test.bin")], 2, 1, 100)?,
                })
            }
            DatasetSource::Folder { dir } => {
                let dir = Path::new(dir);
                let train = load_class_folders(&dir.join("train"), None)?;
                let classes = train.1;
                Ok(Splits {
                    train: train.0,
                    test: load_class_folders(&dir.join("test"), Some(&classes))?.0,
                })
            }
        }
    }
}

pub const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Parse CIFAR binary records: `label_bytes` label bytes (the one at
/// `label_index` is used) followed by 3072 channel-major pixel bytes.
pub fn load_cifar_binary(
    files: &[impl AsRef<Path>],
    label_bytes: usize,
    label_index: usize,
    num_classes: usize,
) -> Result<Dataset> {
    let record = label_bytes + CIFAR_PIXELS;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for file in files {
        let file = file.as_ref();
        let bytes = fs::read(file).map_err(|e| Error::io(file, e))?;
        if bytes.len() % record != 0 {
            return Err(Error::InvalidDataset(format!(
                "{}: {} bytes is not a whole number of {record}-byte records",
                file.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(record) {
            labels.push(rec[label_index] as usize);
            pixels.extend(rec[label_bytes..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    Dataset::from_raw([3, CIFAR_SIDE, CIFAR_SIDE], pixels, labels, num_classes)
}

/// Load `<root>/<class>/<image>` trees. Class indices follow the sorted
/// folder names unless `classes` pins them.
pub fn load_class_folders(root: &Path, classes: Option<&[String]>) -> Result<(Dataset, Vec<String>)> {
    let read_dir = |p: &Path| fs::read_dir(p).map_err(|e| Error::io(p, e));
    let classes: Vec<String> = match classes {
        Some(c) => c.to_vec(),
        None => {
            let mut names = Vec::new();
            for entry in read_dir(root)? {
                let entry = entry.map_err(|e| Error::io(root, e))?;
                if entry.path().is_dir() {
                    names.push(entry.file_name().to_string_lossy().into_owned());
                }
            }
            names.sort();
            names
        }
    };
    let mut shape = None;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (label, name) in classes.iter().enumerate() {
        let dir = root.join(name);
        let mut files: Vec<_> = read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file)
                .map_err(|e| Error::InvalidDataset(format!("{}: {e}", file.display())))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let this = [3, h, w];
            if *shape.get_or_insert(this) != this {
                return Err(Error::InvalidDataset(format!(
                    "{} is {w}×{h}, expected {:?}",
                    file.display(),
                    shape
                )));
            }
            for ch in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        pixels.push(img.get_pixel(x as u32, y as u32)[ch] as f64 / 255.0);
                    }
                }
            }
            labels.push(label);
        }
    }
    let shape = shape.ok_or_else(|| Error::InvalidDataset(format!("no images under {}", root.display())))?;
    Ok((Dataset::from_raw(shape, pixels, labels, classes.len())?, classes))
}

/// Procedural class patterns with nuisance variation.
///
/// Each class owns one or more modes, each a few colored Gaussian blobs plus
/// an oriented grating; a sample draws one mode of its class.
/// Samples jitter the pattern position and per-channel gain, add a
/// class-independent distractor grating, and add pixel noise. A fraction of
/// training labels can be flipped uniformly at random.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub side: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub blobs_per_class: usize,
    pub modes_per_class: usize,
    pub max_shift: usize,
    pub noise: f64,
    pub distractor: f64,
    pub label_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            side: 12,
            train_size: 10_000,
            test_size: 2_000,
            seed: 2023,
            blobs_per_class: 3,
            modes_per_class: 1,
            max_shift: 2,
            noise: 0.35,
            distractor: 0.5,
            label_noise: 0.0,
        }
    }
}

struct ClassPattern {
    blobs: Vec<([f64; 2], f64, [f64; 3])>,
    grating: (f64, f64, f64, [f64; 3]),
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<Splits> {
        if self.num_classes < 2 || self.side < 4 || self.modes_per_class == 0 {
            return Err(Error::InvalidDataset(format!(
                "synthetic data needs ≥2 classes, side ≥4 and ≥1 mode (got {}, {} and {})",
                self.num_classes, self.side, self.modes_per_class
            )));
        }
        let mut rng = RandomStream::new(self.seed, "synthetic/patterns");
        let side = self.side as f64;
        // class-major: patterns[class * modes + mode]
        let patterns: Vec<ClassPattern> = (0..self.num_classes * self.modes_per_class)
            .map(|_| {
                let blobs = (0..self.blobs_per_class)
                    .map(|_| {
                        let center = [side * (0.2 + 0.6 * rng.uniform()), side * (0.2 + 0.6 * rng.uniform())];
                        let radius = side * (0.08 + 0.12 * rng.uniform());
                        let color = [rng.uniform() * 2.0 - 1.0, rng.uniform() * 2.0 - 1.0, rng.uniform() * 2.0 - 1.0];
                        (center, radius, color)
                    })
                    .collect();
                let theta = rng.uniform() * std::f64::consts::PI;
                let freq = 0.5 + 1.5 * rng.uniform();
                let phase = rng.uniform() * std::f64::consts::TAU;
                let color = [rng.uniform() - 0.5, rng.uniform() - 0.5, rng.uniform() - 0.5];
                ClassPattern {
                    blobs,
                    grating: (theta, freq, phase, color),
                }
            })
            .collect();

        let train = self.render(&patterns, self.train_size, "synthetic/train", self.label_noise)?;
        let test = self.render(&patterns, self.test_size, "synthetic/test", 0.0)?;
        Ok(Splits { train, test })
    }

    fn render(&self, patterns: &[ClassPattern], count: usize, stream: &str, label_noise: f64) -> Result<Dataset> {
        let mut rng = RandomStream::new(self.seed, stream);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let s = self.side;
        let side = s as f64;
        let mut pixels = Vec::with_capacity(count * 3 * s * s);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            // balanced labels, deterministic order
            let class = i % self.num_classes;
            let mode = if self.modes_per_class > 1 { rng.below(self.modes_per_class) } else { 0 };
            let pat = &patterns[class * self.modes_per_class + mode];
            let shift = self.max_shift as f64;
            let dx = (rng.uniform() * 2.0 - 1.0) * shift;
            let dy = (rng.uniform() * 2.0 - 1.0) * shift;
            let gain: Vec<f64> = (0..3).map(|_| 0.7 + 0.6 * rng.uniform()).collect();
            let d_theta = rng.uniform() * std::f64::consts::PI;
            let d_freq = 0.5 + 1.5 * rng.uniform();
            let d_phase = rng.uniform() * std::f64::consts::TAU;
            let d_color: Vec<f64> = (0..3).map(|_| rng.uniform() - 0.5).collect();
            let (theta, freq, phase, gcolor) = pat.grating;
            for ch in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        let (px, py) = (x as f64 - dx, y as f64 - dy);
                        let mut v = 0.0;
                        for (center, radius, color) in &pat.blobs {
                            let d2 = (px - center[0]).powi(2) + (py - center[1]).powi(2);
                            v += color[ch] * (-d2 / (2.0 * radius * radius)).exp();
                        }
                        let u = (px * theta.cos() + py * theta.sin()) / side * std::f64::consts::TAU;
                        v += gcolor[ch] * (freq * u + phase).sin();
                        let ud = (x as f64 * d_theta.cos() + y as f64 * d_theta.sin()) / side * std::f64::consts::TAU;
                        v += self.distractor * d_color[ch] * (d_freq * ud + d_phase).sin();
                        v = gain[ch] * v + self.noise * normal.sample(&mut rng);
                        pixels.push(v);
                    }
                }
            }
            let label = if label_noise > 0.0 && rng.uniform() < label_noise {
                rng.below(self.num_classes)
            } else {
                class
            };
            labels.push(label);
        }
        Dataset::from_raw([3, s, s], pixels, labels, self.num_classes)
    }
}

/// Pad-and-crop plus horizontal flip, applied per image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    pub pad: usize,
    pub flip: bool,
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        self.pad == 0 && !self.flip
    }

    pub fn apply(&self, image: &Tensor, rng: &mut RandomStream) -> Tensor {
        if self.is_identity() {
            return image.clone();
        }
        let (c, h, w) = match image.shape() {
            &[c, h, w] => (c, h, w),
            _ => return image.clone(),
        };
        let p = self.pad as isize;
        let oy = rng.below(2 * self.pad + 1) as isize - p;
        let ox = rng.below(2 * self.pad + 1) as isize - p;
        let flip = self.flip && rng.coin();
        let src = image.data();
        Tensor::from_fn(&[c, h, w], |i| {
            let (ch, rest) = (i / (h * w), i % (h * w));
            let (y, x) = (rest / w, rest % w);
            let x = if flip { w - 1 - x } else { x };
            let (sy, sx) = (y as isize + oy, x as isize + ox);
            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                0.0
            } else {
                src[ch * h * w + sy as usize * w + sx as usize]
            }
        })
    }
}
