//! Image datasets on disk.
//!
//! ```text
//! images/<name>.ppm|pgm
//! labels.csv            filename,label   (one row per label; an optional header)
//! masks/<stem>_<label>.pgm or masks/<stem>.pgm   nonzero = foreground
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Binary `H×W` foreground mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height * width != data.len() || data.is_empty() {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                len: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_luma8();
        let (w, h) = img.dimensions();
        Self::new(
            h as usize,
            w as usize,
            img.into_raw().into_iter().map(|v| v != 0).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// One image with every label attached to it.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetImage<T> {
    pub name: String,
    /// `C×H×W` with values in `[0, 1]`.
    pub image: Tensor<T>,
    pub labels: Vec<usize>,
    /// Masks keyed by label; a per-image mask is stored under every label.
    pub masks: BTreeMap<usize, Mask>,
}

impl<T: Scalar> DatasetImage<T> {
    pub fn mask(&self, label: usize) -> Option<&Mask> {
        self.masks.get(&label)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    images: Vec<DatasetImage<T>>,
}

/// Reads an 8-bit PPM/PGM as a `channels×H×W` tensor scaled to `[0, 1]`.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>, channels: usize) -> Result<Tensor<T>> {
    let img = image::open(path.as_ref())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let interleaved = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => return Err(Error::Unsupported(format!("{c}-channel images are not supported"))),
    };
    let mut data = vec![T::zero(); channels * h * w];
    for (i, &v) in interleaved.iter().enumerate() {
        let (p, c) = (i / channels, i % channels);
        data[c * h * w + p] = T::of(v as f64 / 255.0);
    }
    Tensor::new(vec![channels, h, w], data)
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Vec<DatasetImage<T>>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        Ok(Self { images })
    }

    /// Loads `dir` for a model taking `channels`-channel images.
    pub fn load(dir: impl AsRef<Path>, channels: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(dir.join("labels.csv"))
            .map_err(|e| Error::Dataset(format!("labels.csv: {e}")))?;
        let mut order: Vec<String> = Vec::new();
        let mut labels: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Dataset(format!("labels.csv: {e}")))?;
            if rec.len() != 2 {
                return Err(Error::Dataset(format!(
                    "labels.csv row {}: expected `filename,label`",
                    row + 1
                )));
            }
            let label = match rec[1].parse::<usize>() {
                Ok(l) => l,
                Err(_) if row == 0 => continue,
                Err(_) => {
                    return Err(Error::Dataset(format!(
                        "labels.csv row {}: bad label `{}`",
                        row + 1,
                        &rec[1]
                    )))
                }
            };
            let name = rec[0].to_string();
            if !labels.contains_key(&name) {
                order.push(name.clone());
            }
            labels.entry(name).or_default().push(label);
        }
        let mut images = Vec::with_capacity(order.len());
        for name in order {
            let image = load_image(dir.join("images").join(&name), channels)?;
            let stem = Path::new(&name)
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Dataset(format!("bad file name `{name}`")))?
                .to_string();
            let labels = labels.remove(&name).expect("collected above");
            let mut masks = BTreeMap::new();
            for &l in &labels {
                let per_label = dir.join("masks").join(format!("{stem}_{l}.pgm"));
                let shared = dir.join("masks").join(format!("{stem}.pgm"));
                let path: Option<PathBuf> = [per_label, shared].into_iter().find(|p| p.is_file());
                if let Some(p) = path {
                    let m = Mask::load(&p)?;
                    if [m.height(), m.width()] != image.shape()[1..] {
                        return Err(Error::Dataset(format!(
                            "mask {} does not match image size",
                            p.display()
                        )));
                    }
                    masks.insert(l, m);
                }
            }
            images.push(DatasetImage {
                name,
                image,
                labels,
                masks,
            });
        }
        Self::new(images)
    }

    pub fn images(&self) -> &[DatasetImage<T>] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Every `(image index, label)` pair in file order.
    pub fn samples(&self) -> Vec<(usize, usize)> {
        self.images
            .iter()
            .enumerate()
            .flat_map(|(i, img)| img.labels.iter().map(move |&l| (i, l)))
            .collect()
    }
}
