//! Reverse-mode propagation of a logit-space seed down to every layer input.

use crate::error::{Error, Result};
use crate::model::{ops, ForwardTrace, Layer, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `∂L/∂x` for every cached layer input, indexed like
/// [`ForwardTrace::inputs`] (execution order).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTrace<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> GradientTrace<T> {
    /// Gradient at the input of the layer at execution position `k`.
    pub fn grad(&self, k: usize) -> &Tensor<T> {
        &self.grads[k]
    }

    pub fn grads(&self) -> &[Tensor<T>] {
        &self.grads
    }

    /// Gradient with respect to the standardized image.
    pub fn input_grad(&self) -> &Tensor<T> {
        &self.grads[0]
    }
}

/// Gradient of one layer: maps `∂L/∂out` to `∂L/∂x` given the cached input.
pub fn layer_backward<T: Scalar>(layer: &Layer<T>, x: &Tensor<T>, g_out: &Tensor<T>) -> Result<Tensor<T>> {
    match layer {
        Layer::Conv2d(c) => ops::conv2d_transpose(g_out, &c.weight, x.shape(), c.stride, c.padding),
        Layer::Linear(l) => ops::linear_transpose(g_out, &l.weight),
        Layer::Relu => {
            if g_out.shape() != x.shape() {
                return Err(Error::ShapeMismatch {
                    op: "relu backward",
                    left: g_out.shape().to_vec(),
                    right: x.shape().to_vec(),
                });
            }
            let data = x
                .data()
                .iter()
                .zip(g_out.data())
                .map(|(&xi, &g)| if xi > T::zero() { g } else { T::zero() })
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        }
        Layer::MaxPool2d(p) => ops::maxpool2d_route(g_out, x, *p),
        Layer::AvgPool2d(p) => ops::avgpool2d_transpose(g_out, x.shape(), *p),
        Layer::Flatten => g_out.clone().reshape(x.shape().to_vec()),
    }
}

/// Chain rule from `seed = ∂L/∂y` down to the image.
pub fn backward<T: Scalar>(model: &Model<T>, trace: &ForwardTrace<T>, seed: &Tensor<T>) -> Result<GradientTrace<T>> {
    trace.check(model)?;
    if seed.shape() != [model.class_count()] {
        return Err(Error::ShapeMismatch {
            op: "backward seed",
            left: seed.shape().to_vec(),
            right: vec![model.class_count()],
        });
    }
    let mut grads = vec![None; model.len()];
    let mut g = seed.clone();
    for k in (0..model.len()).rev() {
        g = layer_backward(model.layer(k), trace.input(k), &g)?;
        grads[k] = Some(g.clone());
    }
    let grads = grads
        .into_iter()
        .map(|g| g.expect("every layer visited").ensure_finite("backward"))
        .collect::<Result<_>>()?;
    Ok(GradientTrace { grads })
}

/// One-hot seed selecting logit `class`.
pub fn one_hot<T: Scalar>(count: usize, class: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(vec![count]);
    t.data_mut()[class] = T::one();
    t
}
