//! Dataset description and ingestion: seeded synthetic Gaussian clusters for
//! desk-scale runs, or an on-disk image folder.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{AespError, Result};

/// Image stored channel-major (`C × H × W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn pixel(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub class_id: usize,
    pub image: Image,
}

/// Class-indexed train and test samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn train_for<'a>(&'a self, classes: &'a [usize]) -> impl Iterator<Item = &'a Sample> + 'a {
        self.train.iter().filter(move |s| classes.contains(&s.class_id))
    }

    pub fn test_for<'a>(&'a self, classes: &'a [usize]) -> impl Iterator<Item = &'a Sample> + 'a {
        self.test.iter().filter(move |s| classes.contains(&s.class_id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub source: DatasetSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Folder(FolderSpec),
}

/// Isotropic Gaussian cluster per class, rendered as small images.
/// Class means are `margin · u_c` with `u_c ~ N(0, I)`; samples add
/// `noise · N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub margin: f64,
    #[serde(default = "one_f")]
    pub noise: f64,
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

/// `root/{train,test}/<class name>/*.{png,jpg}` with a class list file of
/// one class name per line; line order defines class ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FolderSpec {
    pub root: PathBuf,
    pub class_list: PathBuf,
    pub image_size: usize,
    #[serde(default = "three")]
    pub channels: usize,
    #[serde(default = "imagenet_mean")]
    pub mean: Vec<f64>,
    #[serde(default = "imagenet_std")]
    pub std: Vec<f64>,
}

fn three() -> usize {
    3
}

fn imagenet_mean() -> Vec<f64> {
    vec![0.485, 0.456, 0.406]
}

fn imagenet_std() -> Vec<f64> {
    vec![0.229, 0.224, 0.225]
}

const SYNTHETIC_NAMES: [&str; 24] = [
    "cat", "dog", "owl", "fox", "bee", "cow", "elk", "yak", "ant", "bat", "eel", "emu",
    "hen", "jay", "koi", "ram", "seal", "crab", "frog", "goat", "hare", "lynx", "mole", "wolf",
];

fn synthetic_name(c: usize) -> String {
    SYNTHETIC_NAMES
        .get(c)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{c}"))
}

/// Class names in class-id order, without loading any images.
pub fn class_names(spec: &DatasetSpec) -> Result<Vec<String>> {
    match &spec.source {
        DatasetSource::Synthetic(s) => Ok((0..s.num_classes).map(synthetic_name).collect()),
        DatasetSource::Folder(f) => read_class_list(&f.class_list),
    }
}

fn read_class_list(path: &Path) -> Result<Vec<String>> {
    let list = std::fs::read_to_string(path).map_err(|e| AespError::io(path, e))?;
    let names: Vec<String> = list
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if names.is_empty() {
        return Err(AespError::Data("class list is empty".into()));
    }
    Ok(names)
}

/// Loads or generates the dataset described by `spec`.
pub fn ingest(spec: &DatasetSpec) -> Result<Dataset> {
    match &spec.source {
        DatasetSource::Synthetic(s) => synthetic(&spec.name, s),
        DatasetSource::Folder(f) => folder(&spec.name, f),
    }
}

fn synthetic(name: &str, s: &SyntheticSpec) -> Result<Dataset> {
    if s.num_classes == 0 || s.image_size == 0 || s.channels == 0 {
        return Err(AespError::Data("synthetic dataset needs classes and pixels".into()));
    }
    if s.train_per_class == 0 || s.test_per_class == 0 {
        return Err(AespError::Data(format!(
            "every class needs train and test samples (train {}, test {})",
            s.train_per_class, s.test_per_class
        )));
    }
    if !(s.noise >= 0.0 && s.margin.is_finite()) {
        return Err(AespError::Data("synthetic noise must be >= 0 and margin finite".into()));
    }
    let pixels = s.channels * s.image_size * s.image_size;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut train = Vec::with_capacity(s.num_classes * s.train_per_class);
    let mut test = Vec::with_capacity(s.num_classes * s.test_per_class);
    for c in 0..s.num_classes {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(c as u64 + 1)));
        let mean: Vec<f64> = (0..pixels).map(|_| s.margin * unit.sample(&mut rng)).collect();
        let draw = |rng: &mut ChaCha8Rng| Image {
            channels: s.channels,
            height: s.image_size,
            width: s.image_size,
            data: mean.iter().map(|m| m + s.noise * unit.sample(rng)).collect(),
        };
        for _ in 0..s.train_per_class {
            let image = draw(&mut rng);
            train.push(Sample { id: train.len(), class_id: c, image });
        }
        for _ in 0..s.test_per_class {
            let image = draw(&mut rng);
            test.push(Sample { id: test.len(), class_id: c, image });
        }
    }
    Ok(Dataset {
        name: name.to_string(),
        class_names: (0..s.num_classes).map(synthetic_name).collect(),
        train,
        test,
    })
}

fn folder(name: &str, f: &FolderSpec) -> Result<Dataset> {
    if f.mean.len() != f.channels || f.std.len() != f.channels {
        return Err(AespError::Config(format!(
            "normalization constants must have {} entries",
            f.channels
        )));
    }
    let class_names = read_class_list(&f.class_list)?;
    let mut missing = Vec::new();
    for class in &class_names {
        for split in ["train", "test"] {
            if !f.root.join(split).join(class).is_dir() {
                missing.push(format!("{split}/{class}"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(AespError::Data(format!(
            "missing class directories: {}",
            missing.join(", ")
        )));
    }
    let mut splits = [Vec::new(), Vec::new()];
    for (split, out) in ["train", "test"].iter().zip(splits.iter_mut()) {
        for (class_id, class) in class_names.iter().enumerate() {
            let files = image_files(&f.root.join(split).join(class))?;
            if files.is_empty() {
                return Err(AespError::Data(format!("class {class} has zero {split} samples")));
            }
            for path in files {
                let image = load_image(&path, f)?;
                out.push(Sample { id: out.len(), class_id, image });
            }
        }
    }
    let [train, test] = splits;
    Ok(Dataset {
        name: name.to_string(),
        class_names,
        train,
        test,
    })
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| AespError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

fn load_image(path: &Path, f: &FolderSpec) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| AespError::Data(format!("cannot decode {}: {e}", path.display())))?;
    let size = f.image_size as u32;
    let resized = img.resize_exact(size, size, image::imageops::FilterType::Triangle);
    let mut out = Image::zeros(f.channels, f.image_size, f.image_size);
    let plane = f.image_size * f.image_size;
    match f.channels {
        1 => {
            let g = resized.to_luma8();
            for (k, p) in g.pixels().enumerate() {
                out.data[k] = (p.0[0] as f64 / 255.0 - f.mean[0]) / f.std[0];
            }
        }
        3 => {
            let rgb = resized.to_rgb8();
            for (k, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    out.data[c * plane + k] = (p.0[c] as f64 / 255.0 - f.mean[c]) / f.std[c];
                }
            }
        }
        n => {
            return Err(AespError::Config(format!("unsupported channel count {n}")));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(train: usize, test: usize) -> DatasetSpec {
        DatasetSpec {
            name: "toy".into(),
            source: DatasetSource::Synthetic(SyntheticSpec {
                num_classes: 10,
                train_per_class: train,
                test_per_class: test,
                image_size: 4,
                channels: 1,
                margin: 1.0,
                noise: 0.5,
                seed: 3,
            }),
        }
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let a = ingest(&spec(30, 5)).unwrap();
        assert_eq!(a.train.len(), 300);
        assert_eq!(a.test.len(), 50);
        assert_eq!(a.train_for(&[2, 3]).count(), 60);
        let b = ingest(&spec(30, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_test_samples_is_data_error() {
        assert!(matches!(ingest(&spec(3, 0)), Err(AespError::Data(_))));
    }

    #[test]
    fn folder_ingest_and_missing_class() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::write(root.join("classes.txt"), "red\nblue\n").unwrap();
        for (class, value) in [("red", 200u8), ("blue", 50u8)] {
            for split in ["train", "test"] {
                let d = root.join(split).join(class);
                std::fs::create_dir_all(&d).unwrap();
                let img = image::GrayImage::from_pixel(6, 6, image::Luma([value]));
                img.save(d.join("a.png")).unwrap();
            }
        }
        let f = FolderSpec {
            root: root.to_path_buf(),
            class_list: root.join("classes.txt"),
            image_size: 4,
            channels: 1,
            mean: vec![0.5],
            std: vec![0.25],
        };
        let spec = DatasetSpec {
            name: "folder".into(),
            source: DatasetSource::Folder(f.clone()),
        };
        let ds = ingest(&spec).unwrap();
        assert_eq!(ds.class_names, vec!["red", "blue"]);
        assert_eq!(ds.train.len(), 2);
        let expect = (200.0 / 255.0 - 0.5) / 0.25;
        assert!((ds.train[0].image.data[0] - expect).abs() < 1e-9);

        std::fs::write(root.join("classes.txt"), "red\nblue\ngreen\n").unwrap();
        let err = ingest(&spec).unwrap_err();
        assert!(matches!(&err, AespError::Data(m) if m.contains("green")));
    }
}
