//! Sequential CNNs: layers, models, and the caching forward pass.
//!
//! Layers are stored in execution order (index `k = 0` consumes the image).
//! The attribution literature counts layers the other way round: layer `N`
//! processes the input and layer `1` produces the logits. [`Model::index_from_output`]
//! and [`Model::exec_index`] convert between the two, `n = N - k`.

pub mod ops;
mod pack;

pub use pack::{load_modelpack, read_modelpack, save_modelpack, write_modelpack, MAGIC, VERSION};

use crate::error::{Error, LoadError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use ops::{ConvGeometry, PoolGeometry};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    /// `O×I×Kh×Kw`
    pub weight: Tensor<T>,
    /// `O`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::from_weight(self.weight.shape(), self.stride, self.padding)
            .expect("conv weight validated at construction")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `O×I`
    pub weight: Tensor<T>,
    /// `O`
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    Linear(Linear<T>),
    Relu,
    MaxPool2d(PoolGeometry),
    AvgPool2d(PoolGeometry),
    Flatten,
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Linear(_) => "linear",
            Layer::Relu => "relu",
            Layer::MaxPool2d(_) => "maxpool2d",
            Layer::AvgPool2d(_) => "avgpool2d",
            Layer::Flatten => "flatten",
        }
    }

    /// Output shape for a given input shape, or a description of why the
    /// layer cannot consume it.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        let bad = |why: &str| format!("{} cannot consume {input:?}: {why}", self.kind());
        match self {
            Layer::Conv2d(c) => {
                let g = ConvGeometry::from_weight(c.weight.shape(), c.stride, c.padding)
                    .map_err(|e| bad(&e.to_string()))?;
                if c.stride == 0 {
                    return Err(bad("stride must be at least 1"));
                }
                if c.bias.shape() != [g.out_channels] {
                    return Err(bad("bias length differs from output channels"));
                }
                match *input {
                    [ch, h, w] if ch == g.in_channels => {
                        let (ho, wo) = g.output_hw(h, w).ok_or_else(|| bad("kernel larger than input"))?;
                        Ok(vec![g.out_channels, ho, wo])
                    }
                    _ => Err(bad("expected C×H×W with matching channels")),
                }
            }
            Layer::Linear(l) => {
                let (o, i) = l.weight.dims2("linear").map_err(|e| bad(&e.to_string()))?;
                if l.bias.shape() != [o] {
                    return Err(bad("bias length differs from output features"));
                }
                match *input {
                    [n] if n == i => Ok(vec![o]),
                    _ => Err(bad("expected a vector of matching length")),
                }
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool2d(p) | Layer::AvgPool2d(p) => {
                if p.stride == 0 || p.kernel == 0 {
                    return Err(bad("kernel and stride must be at least 1"));
                }
                p.output_shape(input)
                    .ok_or_else(|| bad("expected C×H×W larger than the window"))
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(c) => ops::conv2d(x, &c.weight, Some(&c.bias), c.stride, c.padding),
            Layer::Linear(l) => ops::linear(x, &l.weight, Some(&l.bias)),
            Layer::Relu => Ok(x.map(|v| if v > T::zero() { v } else { T::zero() })),
            Layer::MaxPool2d(p) => Ok(ops::maxpool2d(x, *p)?.0),
            Layer::AvgPool2d(p) => ops::avgpool2d(x, *p),
            Layer::Flatten => {
                let n = x.len();
                x.clone().reshape(vec![n])
            }
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, Layer::Conv2d(_) | Layer::Linear(_))
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                weight: c.weight.cast(),
                bias: c.bias.cast(),
                stride: c.stride,
                padding: c.padding,
            }),
            Layer::Linear(l) => Layer::Linear(Linear {
                weight: l.weight.cast(),
                bias: l.bias.cast(),
            }),
            Layer::Relu => Layer::Relu,
            Layer::MaxPool2d(p) => Layer::MaxPool2d(*p),
            Layer::AvgPool2d(p) => Layer::AvgPool2d(*p),
            Layer::Flatten => Layer::Flatten,
        }
    }
}

/// Per-channel input standardization `(x - mean) / std`. Empty vectors mean
/// identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessing<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> Preprocessing<T> {
    pub fn identity() -> Self {
        Self {
            mean: Vec::new(),
            std: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.mean.is_empty()
    }
}

/// A validated sequential network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    layers: Vec<Layer<T>>,
    class_count: usize,
    input_shape: Vec<usize>,
    preprocessing: Preprocessing<T>,
    /// Input shape of every layer plus the final output shape.
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(
        layers: Vec<Layer<T>>,
        input_shape: Vec<usize>,
        class_count: usize,
        preprocessing: Preprocessing<T>,
    ) -> Result<Self> {
        let topo = |m: String| Error::Load(LoadError::Topology(m));
        if layers.is_empty() {
            return Err(topo("model has no layers".into()));
        }
        if !matches!(input_shape.len(), 1 | 3) || input_shape.contains(&0) {
            return Err(topo(format!("input shape {input_shape:?} must be C×H×W or a vector")));
        }
        let pre_ok = preprocessing.mean.len() == preprocessing.std.len()
            && (preprocessing.mean.is_empty() || preprocessing.mean.len() == input_shape[0]);
        if !pre_ok {
            return Err(topo(
                "preprocessing mean/std must have one entry per input channel".into(),
            ));
        }
        if preprocessing.std.iter().any(|s| *s <= T::zero() || !s.is_finite()) {
            return Err(topo("preprocessing std must be positive".into()));
        }
        let mut shapes = vec![input_shape.clone()];
        for (k, layer) in layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|e| topo(format!("layer {k}: {e}")))?;
            shapes.push(next);
        }
        if shapes.last().unwrap() != &[class_count] {
            return Err(topo(format!(
                "final output shape {:?} is not a vector of {class_count} classes",
                shapes.last().unwrap()
            )));
        }
        Ok(Self {
            layers,
            class_count,
            input_shape,
            preprocessing,
            shapes,
        })
    }

    /// Joins a feature extractor and a head into one network. The head must
    /// not carry preprocessing of its own.
    pub fn chain(features: &Model<T>, head: &Model<T>) -> Result<Self> {
        if !head.preprocessing.is_identity() {
            return Err(Error::Unsupported("head model must not declare preprocessing".into()));
        }
        if features.output_shape() != head.input_shape() {
            return Err(Error::ShapeMismatch {
                op: "chain",
                left: features.output_shape().to_vec(),
                right: head.input_shape().to_vec(),
            });
        }
        let layers = features.layers.iter().chain(&head.layers).cloned().collect();
        Self::new(
            layers,
            features.input_shape.clone(),
            head.class_count,
            features.preprocessing.clone(),
        )
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layer(&self, k: usize) -> &Layer<T> {
        &self.layers[k]
    }

    /// Number of layers, `N`.
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    /// Input shape of the layer at execution position `k`.
    pub fn layer_input_shape(&self, k: usize) -> &[usize] {
        &self.shapes[k]
    }

    pub fn preprocessing(&self) -> &Preprocessing<T> {
        &self.preprocessing
    }

    /// Reverse (output-first) index `n ∈ 1..=N` of execution position `k`.
    pub fn index_from_output(&self, k: usize) -> usize {
        self.layers.len() - k
    }

    /// Execution position of reverse index `n`.
    pub fn exec_index(&self, n: usize) -> Result<usize> {
        if n == 0 || n > self.layers.len() {
            return Err(Error::LayerOutOfRange {
                index: n,
                count: self.layers.len(),
            });
        }
        Ok(self.layers.len() - n)
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.class_count {
            return Err(Error::ClassOutOfRange {
                class,
                count: self.class_count,
            });
        }
        Ok(())
    }

    /// Applies the per-channel standardization.
    pub fn normalize(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        if image.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: image.shape().to_vec(),
                right: self.input_shape.clone(),
            });
        }
        if self.preprocessing.is_identity() {
            return Ok(image.clone());
        }
        let channels = self.input_shape[0];
        let plane = image.len() / channels;
        let mut out = image.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i / plane;
            *v = (*v - self.preprocessing.mean[c]) / self.preprocessing.std[c];
        }
        Ok(out)
    }

    /// Forward pass on a raw image, caching every layer input.
    pub fn forward(&self, image: &Tensor<T>) -> Result<ForwardTrace<T>> {
        let x = self.normalize(image)?;
        self.forward_normalized(x)
    }

    /// Forward pass on an already standardized input.
    pub fn forward_normalized(&self, x: Tensor<T>) -> Result<ForwardTrace<T>> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: x.shape().to_vec(),
                right: self.input_shape.clone(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for layer in &self.layers {
            let next = layer.forward(&cur)?;
            inputs.push(cur);
            cur = next;
        }
        Ok(ForwardTrace {
            inputs,
            logits: cur.ensure_finite("forward")?,
        })
    }

    /// Logits only, without caching intermediates.
    pub fn logits_normalized(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            layers: self.layers.iter().map(Layer::cast).collect(),
            class_count: self.class_count,
            input_shape: self.input_shape.clone(),
            preprocessing: Preprocessing {
                mean: self.preprocessing.mean.iter().map(|v| U::of(v.as_f64())).collect(),
                std: self.preprocessing.std.iter().map(|v| U::of(v.as_f64())).collect(),
            },
            shapes: self.shapes.clone(),
        }
    }

    /// Nearest execution position `k' < k` whose layer is a flatten, provided
    /// only shape-preserving layers sit between it and `k`.
    pub(crate) fn flatten_feeding(&self, k: usize) -> Option<usize> {
        let mut j = k;
        while j > 0 {
            j -= 1;
            match self.layers[j] {
                Layer::Flatten => return Some(j),
                Layer::Relu => continue,
                _ => return None,
            }
        }
        None
    }
}

/// Cached activations of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    inputs: Vec<Tensor<T>>,
    logits: Tensor<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Assembles a trace from externally computed parts, checking every shape
    /// against `model`. Used when the head of a network is replayed on a
    /// substituted latent.
    pub fn from_parts(model: &Model<T>, inputs: Vec<Tensor<T>>, logits: Tensor<T>) -> Result<Self> {
        let trace = Self { inputs, logits };
        trace.check(model)?;
        Ok(trace)
    }

    /// Input of the layer at execution position `k`, `x⁽ᴺ⁻ᵏ⁾`.
    pub fn input(&self, k: usize) -> &Tensor<T> {
        &self.inputs[k]
    }

    pub fn inputs(&self) -> &[Tensor<T>] {
        &self.inputs
    }

    /// The standardized image fed to the first layer.
    pub fn image(&self) -> &Tensor<T> {
        &self.inputs[0]
    }

    pub fn logits(&self) -> &Tensor<T> {
        &self.logits
    }

    pub fn into_parts(self) -> (Vec<Tensor<T>>, Tensor<T>) {
        (self.inputs, self.logits)
    }

    pub fn check(&self, model: &Model<T>) -> Result<()> {
        if self.inputs.len() != model.len() {
            return Err(Error::TraceMismatch(format!(
                "{} cached inputs for {} layers",
                self.inputs.len(),
                model.len()
            )));
        }
        for (k, x) in self.inputs.iter().enumerate() {
            if x.shape() != model.layer_input_shape(k) {
                return Err(Error::TraceMismatch(format!(
                    "layer {k} input has shape {:?}, model declares {:?}",
                    x.shape(),
                    model.layer_input_shape(k)
                )));
            }
        }
        if self.logits.shape() != [model.class_count()] {
            return Err(Error::TraceMismatch(format!(
                "logits shape {:?} for {} classes",
                self.logits.shape(),
                model.class_count()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn identity_linear_returns_flattened_image() {
        let eye = t(
            &[4, 4],
            &[1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.],
        );
        let model = Model::new(
            vec![
                Layer::Flatten,
                Layer::Linear(Linear {
                    weight: eye,
                    bias: Tensor::zeros(vec![4]),
                }),
            ],
            vec![1, 2, 2],
            4,
            Preprocessing {
                mean: vec![0.0],
                std: vec![1.0],
            },
        )
        .unwrap();
        let img = t(&[1, 2, 2], &[0.5, -1.0, 2.0, 3.0]);
        let trace = model.forward(&img).unwrap();
        assert_eq!(trace.logits().data(), &[0.5, -1.0, 2.0, 3.0]);
        assert_eq!(trace.inputs().len(), 2);
        assert_eq!(model.index_from_output(0), 2);
        assert_eq!(model.exec_index(1).unwrap(), 1);
        assert!(model.exec_index(0).is_err());
        assert!(model.exec_index(3).is_err());
    }

    #[test]
    fn identity_conv_passes_image_through() {
        let mut w = vec![0.0; 2 * 2];
        w[0] = 1.0;
        w[3] = 1.0;
        let conv = Layer::Conv2d(Conv2d {
            weight: t(&[2, 2, 1, 1], &w),
            bias: Tensor::zeros(vec![2]),
            stride: 1,
            padding: 0,
        });
        let model = Model::new(
            vec![
                conv,
                Layer::Flatten,
                Layer::Linear(Linear {
                    weight: Tensor::ones(vec![1, 8]),
                    bias: Tensor::zeros(vec![1]),
                }),
            ],
            vec![2, 2, 2],
            1,
            Preprocessing::identity(),
        )
        .unwrap();
        let img = t(&[2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let trace = model.forward(&img).unwrap();
        assert_eq!(trace.input(1), &img);
        assert_eq!(trace.logits().data(), &[36.0]);
    }

    #[test]
    fn preprocessing_standardizes_per_channel() {
        let model = Model::new(
            vec![Layer::Flatten],
            vec![2, 1, 1],
            2,
            Preprocessing {
                mean: vec![1.0, 2.0],
                std: vec![2.0, 4.0],
            },
        )
        .unwrap();
        let trace = model.forward(&t(&[2, 1, 1], &[3.0, 10.0])).unwrap();
        assert_eq!(trace.logits().data(), &[1.0, 2.0]);
    }

    #[test]
    fn rejects_wrong_image_shape_and_bad_topology() {
        let model = Model::<f64>::new(vec![Layer::Flatten], vec![1, 2, 1], 2, Preprocessing::identity()).unwrap();
        assert!(matches!(
            model.forward(&Tensor::zeros(vec![1, 1, 2])),
            Err(Error::ShapeMismatch { .. })
        ));
        let bad = Model::<f64>::new(vec![Layer::Flatten], vec![1, 2, 2], 3, Preprocessing::identity());
        assert!(bad.is_err());
        let bad_linear = Model::<f64>::new(
            vec![Layer::Linear(Linear {
                weight: Tensor::zeros(vec![2, 3]),
                bias: Tensor::zeros(vec![2]),
            })],
            vec![1, 2, 2],
            2,
            Preprocessing::identity(),
        );
        assert!(bad_linear.is_err());
    }

    #[test]
    fn forward_is_bitwise_repeatable() {
        let model = Model::<f32>::new(
            vec![
                Layer::Conv2d(Conv2d {
                    weight: Tensor::from_f64(vec![2, 1, 3, 3], &(0..18).map(|i| (i as f64).sin()).collect::<Vec<_>>())
                        .unwrap(),
                    bias: Tensor::from_f64(vec![2], &[0.1, -0.2]).unwrap(),
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
                    weight: Tensor::from_f64(vec![3, 8], &(0..24).map(|i| (i as f64 * 0.7).cos()).collect::<Vec<_>>())
                        .unwrap(),
                    bias: Tensor::zeros(vec![3]),
                }),
            ],
            vec![1, 4, 4],
            3,
            Preprocessing::identity(),
        )
        .unwrap()
        .cast::<f32>();
        let img = Tensor::<f32>::from_f64(
            vec![1, 4, 4],
            &(0..16).map(|i| (i as f64 * 0.3).sin()).collect::<Vec<_>>(),
        )
        .unwrap();
        let a = model.forward(&img).unwrap();
        let b = model.forward(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.logits(), &model.logits_normalized(a.image()).unwrap());
    }
}
