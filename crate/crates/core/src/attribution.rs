//! Relevance propagation primitives and the baseline attribution methods.
//!
//! All rules here share one backbone, [`generic_rule`]: the output-side
//! relevance of a layer is split over its inputs in proportion to each
//! input's contribution `X_j · ∂L_i/∂X_j` to the output pre-activation.

use crate::backprop::GradientTrace;
use crate::error::{Error, Result};
use crate::model::{ops, ForwardTrace, Layer, Model};
use crate::scalar::Scalar;
use crate::tensor::{positive_part, Tensor};

/// Substitute for the layer input inside the generic rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputTransform {
    /// `|x|`
    Abs,
    /// `x⁺`
    Positive,
    /// all ones, shape of `x`
    Ones,
    /// `x`
    Raw,
}

/// Substitute for the layer weights inside the generic rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightTransform {
    Abs,
    Positive,
    Raw,
}

/// Choice of `(X, Θ)`, the denominator stabilizer, and what happens to the
/// relevance of outputs with `z_i = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenericRuleConfig {
    input: InputTransform,
    weight: WeightTransform,
    eps: f64,
    zero_fallback: bool,
}

pub const DEFAULT_EPS: f64 = 1e-9;

impl GenericRuleConfig {
    pub fn new(input: InputTransform, weight: WeightTransform, eps: f64) -> Result<Self> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::Unsupported(format!("stabilizer must be positive, got {eps}")));
        }
        Ok(Self {
            input,
            weight,
            eps,
            zero_fallback: false,
        })
    }

    /// With the fallback on, nothing is lost: what the stabilizer holds back
    /// on a live output goes to that output's own contributions, and a dead
    /// output (`z_i = 0`) is split by `Θ` alone (`X = 𝟙`), then uniformly
    /// over its receptive field. Off, both are dropped. Meant for
    /// non-negative transforms, where `z_i` cannot cancel to near zero.
    pub fn with_zero_fallback(mut self, on: bool) -> Self {
        self.zero_fallback = on;
        self
    }

    /// `X = x⁺, Θ = θ⁺`.
    pub fn lrp() -> Self {
        Self {
            input: InputTransform::Positive,
            weight: WeightTransform::Positive,
            eps: DEFAULT_EPS,
            zero_fallback: false,
        }
    }

    /// `X = |x|, Θ = |θ|`, with the zero-denominator fallback.
    pub fn absolute() -> Self {
        Self {
            input: InputTransform::Abs,
            weight: WeightTransform::Abs,
            eps: DEFAULT_EPS,
            zero_fallback: true,
        }
    }

    /// `X = 𝟙, Θ = |θ|`, with the zero-denominator fallback.
    pub fn input_agnostic() -> Self {
        Self {
            input: InputTransform::Ones,
            weight: WeightTransform::Abs,
            eps: DEFAULT_EPS,
            zero_fallback: true,
        }
    }

    pub fn input(&self) -> InputTransform {
        self.input
    }

    pub fn weight(&self) -> WeightTransform {
        self.weight
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn zero_fallback(&self) -> bool {
        self.zero_fallback
    }

    fn apply_input<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        match self.input {
            InputTransform::Abs => x.abs(),
            InputTransform::Positive => positive_part(x),
            InputTransform::Ones => Tensor::ones(x.shape().to_vec()),
            InputTransform::Raw => x.clone(),
        }
    }

    fn apply_weight<T: Scalar>(&self, w: &Tensor<T>) -> Tensor<T> {
        match self.weight {
            WeightTransform::Abs => w.abs(),
            WeightTransform::Positive => positive_part(w),
            WeightTransform::Raw => w.clone(),
        }
    }
}

/// `r_i / (z_i + ε·sign(z_i))`, zero where `z_i == 0`. With `conserve`, the
/// share the stabilizer holds back is added back as `(r_i − z_i·s_i) / z_i`.
fn stabilized_ratio<T: Scalar>(r: &Tensor<T>, z: &Tensor<T>, eps: f64, conserve: bool) -> Tensor<T> {
    let eps = T::of(eps);
    let data = r
        .data()
        .iter()
        .zip(z.data())
        .map(|(&ri, &zi)| {
            if zi.is_zero() {
                return T::zero();
            }
            let s = ri / (zi + eps * zi.signum());
            if conserve {
                s + (ri - zi * s) / zi
            } else {
                s
            }
        })
        .collect();
    Tensor::new(r.shape().to_vec(), data).expect("same shape as r")
}

/// One proportional split for a parameterized or averaging layer: returns
/// `R` for substituted input `xs` and weights `ws`, and the relevance of
/// dead outputs (`z_i = 0`), which nothing received.
fn split<T: Scalar>(
    layer: &Layer<T>,
    xs: &Tensor<T>,
    ws: Option<&Tensor<T>>,
    r: &Tensor<T>,
    eps: f64,
    conserve: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (z, back) = match layer {
        Layer::Conv2d(c) => {
            let ws = ws.expect("conv weights");
            let z = ops::conv2d(xs, ws, None, c.stride, c.padding)?;
            let s = stabilized_ratio(r, &z, eps, conserve);
            (z, ops::conv2d_transpose(&s, ws, xs.shape(), c.stride, c.padding)?)
        }
        Layer::Linear(_) => {
            let ws = ws.expect("linear weights");
            let z = ops::linear(xs, ws, None)?;
            let s = stabilized_ratio(r, &z, eps, conserve);
            (z, ops::linear_transpose(&s, ws)?)
        }
        Layer::AvgPool2d(p) => {
            let z = ops::avgpool2d(xs, *p)?;
            let s = stabilized_ratio(r, &z, eps, conserve);
            (z, ops::avgpool2d_transpose(&s, xs.shape(), *p)?)
        }
        _ => unreachable!("split is only used for weighted layers"),
    };
    let dead = r
        .data()
        .iter()
        .zip(z.data())
        .map(|(&ri, &zi)| if zi.is_zero() { ri } else { T::zero() })
        .collect();
    let dead = Tensor::new(r.shape().to_vec(), dead)?;
    Ok((crate::tensor::hadamard(xs, &back)?, dead))
}

/// Propagates output relevance `r_prev` of `layer` onto its input `x`:
///
/// `R_j = Σ_i X_j · ∂L_i(X, Θ)/∂X_j · r_prev_i / z_i`, `z_i = L_i(X, Θ)`
///
/// with biases left out of `z`. ReLU and flatten pass relevance through,
/// max pooling hands each window's relevance to its argmax, average pooling
/// is treated as a linear layer with uniform weights.
pub fn generic_rule<T: Scalar>(
    layer: &Layer<T>,
    x: &Tensor<T>,
    r_prev: &Tensor<T>,
    cfg: &GenericRuleConfig,
) -> Result<Tensor<T>> {
    let expected_out = layer.output_shape(x.shape()).map_err(Error::Unsupported)?;
    if r_prev.shape() != expected_out.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "generic_rule",
            left: r_prev.shape().to_vec(),
            right: expected_out,
        });
    }
    let weight = match layer {
        Layer::Conv2d(c) => Some(&c.weight),
        Layer::Linear(l) => Some(&l.weight),
        Layer::AvgPool2d(_) => None,
        Layer::Relu => return Ok(r_prev.clone()),
        Layer::MaxPool2d(p) => return ops::maxpool2d_route(r_prev, x, *p),
        Layer::Flatten => return r_prev.clone().reshape(x.shape().to_vec()),
    };
    let ws = weight.map(|w| cfg.apply_weight(w));
    let xs = cfg.apply_input(x);
    if !cfg.zero_fallback {
        return Ok(split(layer, &xs, ws.as_ref(), r_prev, cfg.eps, false)?.0);
    }
    let (mut out, mut dead) = split(layer, &xs, ws.as_ref(), r_prev, cfg.eps, true)?;
    let ones = Tensor::ones(x.shape().to_vec());
    let flat = weight.map(|w| Tensor::ones(w.shape().to_vec()));
    for stage_ws in [ws.as_ref(), flat.as_ref()] {
        if dead.data().iter().all(|v| v.is_zero()) {
            break;
        }
        let (extra, still_dead) = split(layer, &ones, stage_ws, &dead, cfg.eps, true)?;
        out = out.add(&extra)?;
        dead = still_dead;
    }
    Ok(out)
}

/// `g + r − (Σr / #{g ≠ 0})·𝟙[g ≠ 0]`, so the output sums to `Σg`.
///
/// `r` may be an `H×W` map when `g` is `C×H×W`; it is then repeated over the
/// channels before anything else.
pub fn delta_shift<T: Scalar>(g: &Tensor<T>, r: &Tensor<T>) -> Result<Tensor<T>> {
    let r = if r.shape() == g.shape() {
        r.clone()
    } else if g.rank() == 3 && r.rank() == 2 && g.shape()[1..] == *r.shape() {
        r.broadcast_channels(g.shape()[0])?
    } else {
        return Err(Error::ShapeMismatch {
            op: "delta_shift",
            left: g.shape().to_vec(),
            right: r.shape().to_vec(),
        });
    };
    let residual_sum = r.sum();
    let support = g.count_nonzero();
    if support == 0 {
        if residual_sum != 0.0 {
            return Err(Error::DegenerateShift { residual_sum });
        }
        return g.add(&r);
    }
    let shift = residual_sum / support as f64;
    let data = g
        .data()
        .iter()
        .zip(r.data())
        .map(|(&gi, &ri)| {
            let v = gi.as_f64() + ri.as_f64();
            T::of(if gi.is_zero() { v } else { v - shift })
        })
        .collect();
    Tensor::new(g.shape().to_vec(), data)?.ensure_finite("delta_shift")
}

/// Initial relevance vector `R⁽⁰⁾` placed on the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceInit<T> {
    pub relevance: Tensor<T>,
    pub class: usize,
}

impl<T: Scalar> RelevanceInit<T> {
    /// Zero except `R⁽⁰⁾_t = y_t`.
    pub fn target(logits: &Tensor<T>, class: usize) -> Self {
        let mut relevance = Tensor::zeros(logits.shape().to_vec());
        relevance.data_mut()[class] = logits.data()[class];
        Self { relevance, class }
    }

    /// `(y − R⁽⁰⁾) / (|𝒞| − 1)`: every class but the target, equally weighted.
    pub fn rest(logits: &Tensor<T>, class: usize) -> Self {
        let denom = T::of((logits.len() - 1) as f64);
        let target = Self::target(logits, class);
        let relevance = logits.sub(&target.relevance).expect("same shape").map(|v| v / denom);
        Self { relevance, class }
    }
}

/// Runs [`generic_rule`] with a fixed configuration from the logits down to
/// the image.
pub fn propagate_relevance<T: Scalar>(
    model: &Model<T>,
    trace: &ForwardTrace<T>,
    init: &Tensor<T>,
    cfg: &GenericRuleConfig,
) -> Result<Tensor<T>> {
    trace.check(model)?;
    let mut r = init.clone();
    for k in (0..model.len()).rev() {
        r = generic_rule(model.layer(k), trace.input(k), &r, cfg)?;
    }
    r.ensure_finite("propagate_relevance")
}

/// Layer-wise relevance propagation with `X = x⁺, Θ = θ⁺`.
pub fn lrp<T: Scalar>(model: &Model<T>, trace: &ForwardTrace<T>, class: usize) -> Result<Tensor<T>> {
    model.check_class(class)?;
    let init = RelevanceInit::target(trace.logits(), class);
    propagate_relevance(model, trace, &init.relevance, &GenericRuleConfig::lrp())
}

/// `a · Σb / Σa`, zero when `Σa == 0`.
pub fn match_sum<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let sa = a.sum();
    if sa == 0.0 {
        return Tensor::zeros(a.shape().to_vec());
    }
    let k = b.sum() / sa;
    a.map(|v| T::of(v.as_f64() * k))
}

/// Contrastive LRP: target relevance minus the sum-matched relevance of all
/// other classes.
pub fn clrp<T: Scalar>(model: &Model<T>, trace: &ForwardTrace<T>, class: usize) -> Result<Tensor<T>> {
    if model.class_count() < 2 {
        return Err(Error::Unsupported("contrastive LRP needs at least two classes".into()));
    }
    model.check_class(class)?;
    let cfg = GenericRuleConfig::lrp();
    let tgt = propagate_relevance(
        model,
        trace,
        &RelevanceInit::target(trace.logits(), class).relevance,
        &cfg,
    )?;
    let rst = propagate_relevance(
        model,
        trace,
        &RelevanceInit::rest(trace.logits(), class).relevance,
        &cfg,
    )?;
    tgt.sub(&match_sum(&rst, &tgt))
}

/// Channel-weighted activation map of a `C×H×W` input and its gradient:
/// `((1/C) Σ_c x_c · Σ_{h,w} ∇x_{c,h,w})⁺`.
pub fn grad_cam_map<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3("grad_cam")?;
    if grad.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "grad_cam",
            left: x.shape().to_vec(),
            right: grad.shape().to_vec(),
        });
    }
    let plane = h * w;
    let weights: Vec<f64> = (0..c)
        .map(|ch| {
            grad.data()[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|v| v.as_f64())
                .sum()
        })
        .collect();
    let data = (0..plane)
        .map(|p| {
            let s: f64 = (0..c).map(|ch| x.data()[ch * plane + p].as_f64() * weights[ch]).sum();
            T::of((s / c as f64).max(0.0))
        })
        .collect();
    Tensor::new(vec![h, w], data)
}

/// Grad-CAM at the input of the layer with reverse index `layer` (1 is the
/// output layer, `N` the first layer).
pub fn grad_cam<T: Scalar>(trace: &ForwardTrace<T>, grads: &GradientTrace<T>, layer: usize) -> Result<Tensor<T>> {
    let n_layers = trace.inputs().len();
    if layer == 0 || layer > n_layers || grads.grads().len() != n_layers {
        return Err(Error::LayerOutOfRange {
            index: layer,
            count: n_layers,
        });
    }
    let k = n_layers - layer;
    grad_cam_map(trace.input(k), grads.grad(k))
}

/// Reverse index of the deepest layer whose input is still spatial, the
/// conventional Grad-CAM site.
pub fn default_grad_cam_layer<T: Scalar>(model: &Model<T>) -> Result<usize> {
    (0..model.len())
        .rev()
        .find(|&k| model.layer_input_shape(k).len() == 3)
        .map(|k| model.index_from_output(k))
        .ok_or_else(|| Error::Unsupported("model has no spatial layer input".into()))
}

/// Bilinear resize of an `H×W` map (half-pixel centers, edge clamped).
pub fn upsample_bilinear<T: Scalar>(map: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w) = map.dims2("upsample")?;
    if (h, w) == (out_h, out_w) {
        return Ok(map.clone());
    }
    let src = |i: usize, o: usize, n: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * n as f64 / o as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, pos - i0 as f64)
    };
    let d = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = src(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = src(ox, out_w, w);
            let v = |y: usize, x: usize| d[y * w + x].as_f64();
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            out.push(T::of(top * (1.0 - fy) + bot * fy));
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}
