//! Heatmaps scored as foreground segmentations.

use serde::Serialize;

use super::dataset::Mask;
use crate::error::{Error, Result};
use crate::methods::Polarity;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegRecord {
    pub pixel_accuracy: f64,
    /// `None` when the mask has no foreground.
    pub average_precision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegReport {
    /// Correct pixels over all pixels.
    pub pixel_accuracy: f64,
    /// Mean AP over images whose mask has foreground.
    pub map: f64,
    pub per_image: Vec<SegRecord>,
}

/// Thresholded prediction: `> 0` for signed maps, `> mean` otherwise.
pub fn binarize<T: Scalar>(heatmap: &Tensor<T>, polarity: Polarity) -> Vec<bool> {
    let thr = match polarity {
        Polarity::Signed => 0.0,
        Polarity::PositiveOnly => heatmap.sum() / heatmap.len() as f64,
    };
    heatmap.data().iter().map(|v| v.as_f64() > thr).collect()
}

/// Area under the precision-recall curve obtained by sweeping the threshold
/// over every distinct score, highest first: `Σ (R_k − R_{k−1}) · P_k`.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            tp += truth[idx[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Some(ap)
}

pub fn segmentation_eval<T: Scalar>(heatmaps: &[Tensor<T>], masks: &[Mask], polarity: Polarity) -> Result<SegReport> {
    if heatmaps.len() != masks.len() || heatmaps.is_empty() {
        return Err(Error::Dataset(format!(
            "{} heatmaps for {} masks",
            heatmaps.len(),
            masks.len()
        )));
    }
    let (mut hits, mut pixels) = (0usize, 0usize);
    let mut per_image = Vec::with_capacity(heatmaps.len());
    for (hm, mask) in heatmaps.iter().zip(masks) {
        if hm.shape() != [mask.height(), mask.width()] {
            return Err(Error::ShapeMismatch {
                op: "segmentation_eval",
                left: hm.shape().to_vec(),
                right: vec![mask.height(), mask.width()],
            });
        }
        let pred = binarize(hm, polarity);
        let agree = pred.iter().zip(mask.data()).filter(|(p, m)| p == m).count();
        hits += agree;
        pixels += pred.len();
        let scores: Vec<f64> = hm.data().iter().map(|v| v.as_f64()).collect();
        per_image.push(SegRecord {
            pixel_accuracy: agree as f64 / pred.len() as f64,
            average_precision: average_precision(&scores, mask.data()),
        });
    }
    let aps: Vec<f64> = per_image.iter().filter_map(|r| r.average_precision).collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    Ok(SegReport {
        pixel_accuracy: hits as f64 / pixels as f64,
        map,
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(bits: &[bool], h: usize, w: usize) -> Mask {
        Mask::new(h, w, bits.to_vec()).unwrap()
    }

    #[test]
    fn perfect_and_inverted_predictors() {
        let bits = [true, false, false, true];
        let hm = Tensor::<f64>::from_f64(vec![2, 2], &[1., -1., -1., 1.]).unwrap();
        let r = segmentation_eval(std::slice::from_ref(&hm), &[mask(&bits, 2, 2)], Polarity::Signed).unwrap();
        assert_eq!(r.pixel_accuracy, 1.0);
        assert_eq!(r.map, 1.0);
        let r = segmentation_eval(&[hm.scale(-1.0)], &[mask(&bits, 2, 2)], Polarity::Signed).unwrap();
        assert_eq!(r.pixel_accuracy, 0.0);
    }

    #[test]
    fn positive_only_thresholds_at_mean() {
        let hm = Tensor::<f64>::from_f64(vec![1, 4], &[0.1, 0.2, 0.9, 1.0]).unwrap();
        assert_eq!(binarize(&hm, Polarity::PositiveOnly), vec![false, false, true, true]);
        assert_eq!(binarize(&hm, Polarity::Signed), vec![true; 4]);
    }

    #[test]
    fn ap_matches_hand_computation() {
        // ranks: T F T F → P@1=1, P@3=2/3, AP = 0.5·1 + 0.5·2/3
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false]).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
        // one tie group containing everything → precision = prevalence
        let ap = average_precision(&[0.5; 4], &[true, false, false, false]).unwrap();
        assert!((ap - 0.25).abs() < 1e-12);
        assert_eq!(average_precision(&[0.1, 0.2], &[false, false]), None);
    }

    #[test]
    fn random_heatmap_ap_is_near_prevalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let bits: Vec<bool> = (0..256).map(|i| i % 2 == 0).collect();
        let m = mask(&bits, 16, 16);
        let mut total = 0.0;
        for _ in 0..100 {
            let hm = Tensor::<f64>::new(vec![16, 16], (0..256).map(|_| rng.gen()).collect()).unwrap();
            total += segmentation_eval(&[hm], std::slice::from_ref(&m), Polarity::PositiveOnly)
                .unwrap()
                .map;
        }
        assert!((total / 100.0 - 0.5).abs() <= 0.05);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let hm = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(segmentation_eval(&[hm], &[mask(&[true; 4], 2, 2)], Polarity::Signed).is_err());
    }

    proptest! {
        #[test]
        fn ap_is_invariant_to_monotone_transforms(vals in prop::collection::vec(-3.0f64..3.0, 12), bits in prop::collection::vec(any::<bool>(), 12)) {
            let warped: Vec<f64> = vals.iter().map(|v| v.exp() * 2.0 + 1.0).collect();
            prop_assert_eq!(average_precision(&vals, &bits), average_precision(&warped, &bits));
        }
    }
}
