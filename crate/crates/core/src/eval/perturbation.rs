//! Negative perturbation: remove the least relevant pixels first and watch
//! the accuracy. A good explanation keeps the accuracy high for longer.

use serde::Serialize;

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which class the heatmap explains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationMode {
    /// The model's top-1 prediction on the clean image.
    Predicted,
    /// The ground-truth label.
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerturbationCurve {
    pub fractions: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub auc: f64,
}

/// `0.1, 0.2, …, 0.9`.
pub fn default_fractions() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Trapezoidal area under `accuracy(fraction)` divided by the fraction span.
/// A single point is its own average.
pub fn auc(fractions: &[f64], accuracy: &[f64]) -> f64 {
    match fractions.len() {
        0 => 0.0,
        1 => accuracy[0],
        n => {
            let area: f64 = (1..n)
                .map(|i| 0.5 * (accuracy[i] + accuracy[i - 1]) * (fractions[i] - fractions[i - 1]))
                .sum();
            area / (fractions[n - 1] - fractions[0])
        }
    }
}

/// Pixel indices in ascending heatmap order; equal values keep row-major order.
pub fn ascending_order<T: Scalar>(heatmap: &Tensor<T>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..heatmap.len()).collect();
    let d = heatmap.data();
    idx.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).expect("finite heatmap"));
    idx
}

/// Number of pixels removed at `fraction` of `pixels`.
pub fn masked_count(fraction: f64, pixels: usize) -> usize {
    ((fraction * pixels as f64).round() as usize).min(pixels)
}

/// Zeroes (in standardized space) the first `count` pixels of `order` across
/// every channel.
pub fn mask_pixels<T: Scalar>(x: &Tensor<T>, order: &[usize], count: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3("mask_pixels")?;
    let plane = h * w;
    let mut out = x.clone();
    let data = out.data_mut();
    for &p in &order[..count] {
        for ch in 0..c {
            data[ch * plane + p] = T::zero();
        }
    }
    let _ = w;
    Ok(out)
}

/// Runs the protocol over every `(image, label)` pair of `dataset`.
///
/// `heatmap_fn(sample, trace, class)` returns an `H×W` map for the clean
/// image; `sample` is the pair's position in [`Dataset::samples`].
pub fn negative_perturbation<T, F>(
    model: &Model<T>,
    dataset: &Dataset<T>,
    mut heatmap_fn: F,
    fractions: &[f64],
    mode: PerturbationMode,
) -> Result<PerturbationCurve>
where
    T: Scalar,
    F: FnMut(usize, &ForwardTrace<T>, usize) -> Result<Tensor<T>>,
{
    if fractions.is_empty()
        || fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || fractions.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::Dataset(
            "fractions must be strictly increasing values in [0, 1]".into(),
        ));
    }
    let samples = dataset.samples();
    if samples.is_empty() {
        return Err(Error::Dataset("no labelled samples".into()));
    }
    let mut correct = vec![0usize; fractions.len()];
    for (s, &(i, label)) in samples.iter().enumerate() {
        let trace = model.forward(&dataset.images()[i].image)?;
        let class = match mode {
            PerturbationMode::Predicted => trace.logits().argmax(),
            PerturbationMode::Target => label,
        };
        let hm = heatmap_fn(s, &trace, class)?;
        let x = trace.image();
        let (_, h, w) = x.dims3("negative_perturbation")?;
        if hm.shape() != [h, w] {
            return Err(Error::ShapeMismatch {
                op: "negative_perturbation",
                left: hm.shape().to_vec(),
                right: vec![h, w],
            });
        }
        let order = ascending_order(&hm.ensure_finite("perturbation heatmap")?);
        for (f, &frac) in fractions.iter().enumerate() {
            let masked = mask_pixels(x, &order, masked_count(frac, h * w))?;
            if model.logits_normalized(&masked)?.argmax() == label {
                correct[f] += 1;
            }
        }
    }
    let accuracy: Vec<f64> = correct.iter().map(|&c| c as f64 / samples.len() as f64).collect();
    Ok(PerturbationCurve {
        auc: auc(fractions, &accuracy),
        fractions: fractions.to_vec(),
        accuracy,
    })
}
