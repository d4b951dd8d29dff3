//! Uniform heatmap interface over every attribution method.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agf::{explain_trace, AgfConfig};
use crate::attribution::{clrp, default_grad_cam_layer, grad_cam, lrp, upsample_bilinear};
use crate::backprop::{backward, one_hot};
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Model};
use crate::scalar::Scalar;
use crate::tensor::{channel_sum_reduce, Tensor};

/// How a heatmap is thresholded into a segmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    /// Positive values are foreground.
    Signed,
    /// Values above the map mean are foreground.
    PositiveOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    Agf(AgfConfig),
    Lrp,
    Clrp,
    /// Reverse layer index; `None` picks the deepest spatial layer.
    GradCam(Option<usize>),
    /// Uniform noise, seeded per image.
    Random(u64),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Agf(_) => "agf",
            Method::Lrp => "lrp",
            Method::Clrp => "clrp",
            Method::GradCam(_) => "gradcam",
            Method::Random(_) => "random",
        }
    }

    pub fn polarity(&self) -> Polarity {
        match self {
            Method::Agf(_) | Method::Clrp => Polarity::Signed,
            Method::Lrp | Method::GradCam(_) | Method::Random(_) => Polarity::PositiveOnly,
        }
    }

    /// `H×W` map at image resolution explaining class `t`. `salt`
    /// distinguishes images for the random baseline and is ignored otherwise.
    pub fn heatmap<T: Scalar>(
        &self,
        model: &Model<T>,
        trace: &ForwardTrace<T>,
        t: usize,
        salt: u64,
    ) -> Result<Tensor<T>> {
        model.check_class(t)?;
        let shape = model.input_shape();
        if shape.len() != 3 {
            return Err(Error::Unsupported("heatmaps need a C×H×W model input".into()));
        }
        let (h, w) = (shape[1], shape[2]);
        let map = match self {
            Method::Agf(cfg) => explain_trace(model, trace, t, cfg)?.heatmap,
            Method::Lrp => channel_sum_reduce(&lrp(model, trace, t)?)?,
            Method::Clrp => channel_sum_reduce(&clrp(model, trace, t)?)?,
            Method::GradCam(layer) => {
                let layer = match layer {
                    Some(n) => *n,
                    None => default_grad_cam_layer(model)?,
                };
                let grads = backward(model, trace, &one_hot(model.class_count(), t))?;
                upsample_bilinear(&grad_cam(trace, &grads, layer)?, h, w)?
            }
            Method::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
                Tensor::new(vec![h, w], (0..h * w).map(|_| T::of(rng.gen::<f64>())).collect())?
            }
        };
        map.ensure_finite("heatmap")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    /// Parses `agf`, `lrp`, `clrp`, `gradcam` or `random` with default options.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "agf" => Method::Agf(AgfConfig::full()),
            "lrp" => Method::Lrp,
            "clrp" => Method::Clrp,
            "gradcam" => Method::GradCam(None),
            "random" => Method::Random(0),
            other => return Err(Error::Unsupported(format!("unknown method `{other}`"))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ops::PoolGeometry;
    use crate::model::{Conv2d, Layer, Linear, Preprocessing};

    fn model() -> Model<f64> {
        let w: Vec<f64> = (0..2 * 3 * 9).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect();
        let lw: Vec<f64> = (0..3 * 32).map(|i| ((i * 5 % 13) as f64 - 6.0) / 10.0).collect();
        Model::new(
            vec![
                Layer::Conv2d(Conv2d {
                    weight: Tensor::from_f64(vec![2, 3, 3, 3], &w).unwrap(),
                    bias: Tensor::zeros(vec![2]),
                    stride: 1,
                    padding: 1,
                }),
                Layer::Relu,
                Layer::MaxPool2d(PoolGeometry {
                    kernel: 2,
                    stride: 2,
                    padding: 0,
                }),
                Layer::Flatten,
                Layer::Linear(Linear {
                    weight: Tensor::from_f64(vec![3, 32], &lw).unwrap(),
                    bias: Tensor::zeros(vec![3]),
                }),
            ],
            vec![3, 8, 8],
            3,
            Preprocessing::identity(),
        )
        .unwrap()
    }

    #[test]
    fn every_method_returns_image_resolution() {
        let m = model();
        let img = Tensor::from_f64(
            vec![3, 8, 8],
            &(0..192).map(|i| ((i as f64) * 0.37).sin()).collect::<Vec<_>>(),
        )
        .unwrap();
        let trace = m.forward(&img).unwrap();
        for name in ["agf", "lrp", "clrp", "gradcam", "random"] {
            let method: Method = name.parse().unwrap();
            let hm = method.heatmap(&m, &trace, 1, 3).unwrap();
            assert_eq!(hm.shape(), &[8, 8], "{name}");
        }
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn random_baseline_depends_on_salt_only() {
        let m = model();
        let trace = m.forward(&Tensor::ones(vec![3, 8, 8])).unwrap();
        let r = Method::Random(5);
        assert_eq!(
            r.heatmap(&m, &trace, 0, 1).unwrap(),
            r.heatmap(&m, &trace, 2, 1).unwrap()
        );
        assert_ne!(
            r.heatmap(&m, &trace, 0, 1).unwrap(),
            r.heatmap(&m, &trace, 0, 2).unwrap()
        );
    }
}
