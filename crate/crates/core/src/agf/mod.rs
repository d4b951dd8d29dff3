//! Class attribution propagation with guided factorization.
//!
//! Two streams run backwards through the network. The gradient stream is an
//! ordinary backward pass seeded with the derivative of a class-highlighting
//! softmax. The attribution stream starts from `Φ¹ = x⁽¹⁾ ⊙ ∇x⁽¹⁾` and, at
//! every parameterized layer, combines an absolute-influence propagation `C`
//! with a residual built from an input-agnostic propagation, factorizations of
//! the activations and gradients guided by `C`, and the input-gradient
//! interaction. A Δ-shift folds the residual back in so each step conserves
//! the total attribution.

pub mod ssl;

use crate::attribution::{delta_shift, generic_rule, grad_cam_map, GenericRuleConfig};
use crate::backprop::{backward, GradientTrace};
use crate::error::{Error, Result};
use crate::factorization::guided_factorization;
use crate::model::{ForwardTrace, Layer, Model};
use crate::scalar::Scalar;
use crate::tensor::{
    channel_mean_reduce, channel_sum_reduce, hadamard, heaviside_surrogate, normalize_max, positive_part, Tensor,
};

/// Source of the residual added at convolution layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ResidualMode {
    /// `A + F_∇x + (F_x + M)·sigmoid(C)`, subject to the component flags.
    #[default]
    Guided,
    /// Grad-CAM of the layer input, repeated over channels.
    GradCam,
}

/// Residual components; every flag on is the complete method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgfConfig {
    pub use_a: bool,
    pub use_fx: bool,
    pub use_fgrad: bool,
    pub use_m: bool,
    pub use_gate: bool,
    pub residual: ResidualMode,
}

impl Default for AgfConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl AgfConfig {
    pub fn full() -> Self {
        Self {
            use_a: true,
            use_fx: true,
            use_fgrad: true,
            use_m: true,
            use_gate: true,
            residual: ResidualMode::Guided,
        }
    }

    /// Plain `C` propagation, no residual anywhere.
    pub fn only_c() -> Self {
        Self {
            use_a: false,
            use_fx: false,
            use_fgrad: false,
            use_m: false,
            use_gate: false,
            residual: ResidualMode::Guided,
        }
    }

    pub fn gradcam_residual() -> Self {
        Self {
            residual: ResidualMode::GradCam,
            ..Self::full()
        }
    }

    /// Disables the named components (`a`, `fx`, `fgrad`, `m`, `gate`).
    pub fn ablate(mut self, components: &[&str]) -> Result<Self> {
        for &c in components {
            match c.trim() {
                "a" => self.use_a = false,
                "fx" => self.use_fx = false,
                "fgrad" => self.use_fgrad = false,
                "m" => self.use_m = false,
                "gate" => self.use_gate = false,
                "" => {}
                other => return Err(Error::Unsupported(format!("unknown ablation component `{other}`"))),
            }
        }
        Ok(self)
    }

    /// The ablation study columns: full method, `C` only, each component
    /// removed in turn, and the Grad-CAM residual.
    pub fn variants() -> Vec<(&'static str, AgfConfig)> {
        let full = Self::full();
        vec![
            ("full", full),
            ("only-c", Self::only_c()),
            ("no-a", Self { use_a: false, ..full }),
            ("no-fx", Self { use_fx: false, ..full }),
            (
                "no-fgrad",
                Self {
                    use_fgrad: false,
                    ..full
                },
            ),
            ("no-m", Self { use_m: false, ..full }),
            (
                "no-gate",
                Self {
                    use_gate: false,
                    ..full
                },
            ),
            ("r-gradcam", Self::gradcam_residual()),
        ]
    }
}

/// Attribution `Φ⁽ⁿ⁾` on the input of the layer with reverse index `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionState<T> {
    pub layer: usize,
    pub phi: Tensor<T>,
}

/// Gaussian-reweighted softmax target and its gradient on the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSeed {
    /// `∂ŷ_t/∂y`
    pub seed: Vec<f64>,
    /// `ŷ` after reweighting
    pub probabilities: Vec<f64>,
    /// `max_i |y_i − y_t|`
    pub sigma: f64,
}

/// Replaces the logits by `y_t · exp(−½((y − y_t)/σ)²)` and differentiates
/// the softmax probability of `t` through the reweighting, holding `σ` fixed.
/// With `σ = 0` all weights are one.
pub fn class_seed(logits: &[f64], t: usize) -> ClassSeed {
    let yt = logits[t];
    let sigma = logits.iter().map(|y| (y - yt).abs()).fold(0.0, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|&y| {
            if sigma == 0.0 {
                1.0
            } else {
                let u = (y - yt) / sigma;
                (-0.5 * u * u).exp()
            }
        })
        .collect();
    let scaled: Vec<f64> = weights.iter().map(|w| yt * w).collect();
    let top = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    let p: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let pt = p[t];
    // ∂ŷ_t/∂s_k = p_t (δ_tk − p_k)
    let ds: Vec<f64> = (0..p.len())
        .map(|k| pt * (if k == t { 1.0 } else { 0.0 } - p[k]))
        .collect();
    let mut seed = vec![0.0; p.len()];
    for k in 0..p.len() {
        if k == t {
            // s_t = y_t
            seed[t] += ds[k];
            continue;
        }
        let dw_dyk = if sigma == 0.0 {
            0.0
        } else {
            -weights[k] * (logits[k] - yt) / (sigma * sigma)
        };
        // s_k = y_t · w_k(y_k, y_t)
        seed[k] += ds[k] * yt * dw_dyk;
        seed[t] += ds[k] * (weights[k] - yt * dw_dyk);
    }
    ClassSeed {
        seed,
        probabilities: p,
        sigma,
    }
}

/// Seed, full gradient trace and `Φ¹ = x⁽¹⁾ ⊙ ∂ŷ_t/∂x⁽¹⁾`.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialAttribution<T> {
    pub target: usize,
    pub seed: ClassSeed,
    pub grads: GradientTrace<T>,
    pub phi: Tensor<T>,
}

pub fn initial_attribution<T: Scalar>(
    model: &Model<T>,
    trace: &ForwardTrace<T>,
    t: usize,
) -> Result<InitialAttribution<T>> {
    model.check_class(t)?;
    let logits: Vec<f64> = trace.logits().data().iter().map(|v| v.as_f64()).collect();
    let seed = class_seed(&logits, t);
    let seed_t = Tensor::vector(seed.seed.iter().map(|&v| T::of(v)).collect());
    let grads = backward(model, trace, &seed_t)?;
    let last = model.len() - 1;
    let phi = hadamard(trace.input(last), grads.grad(last))?;
    Ok(InitialAttribution {
        target: t,
        seed,
        grads,
        phi,
    })
}

/// `N_max((mean_c x_c ⊙ ∇x_c)⁺)` as an `H×W` map.
pub fn input_gradient_interaction<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(normalize_max(&positive_part(&channel_mean_reduce(&hadamard(
        x, grad,
    )?)?)))
}

/// One convolution step: `Φ = Δshift(C, r)`.
pub fn conv_layer_step<T: Scalar>(
    layer: &Layer<T>,
    x: &Tensor<T>,
    grad: &Tensor<T>,
    phi_prev: &Tensor<T>,
    cfg: &AgfConfig,
) -> Result<Tensor<T>> {
    if !matches!(layer, Layer::Conv2d(_)) {
        return Err(Error::Unsupported(format!("conv step on a {} layer", layer.kind())));
    }
    let (channels, _, _) = x.dims3("conv_layer_step")?;
    let c = generic_rule(layer, x, phi_prev, &GenericRuleConfig::absolute())?;
    if cfg.residual == ResidualMode::GradCam {
        let cam = grad_cam_map(x, grad)?;
        return delta_shift(&c, &cam);
    }
    let mut r = Tensor::zeros(x.shape().to_vec());
    if cfg.use_a {
        r = r.add(&generic_rule(layer, x, phi_prev, &GenericRuleConfig::input_agnostic())?)?;
    }
    if cfg.use_fgrad {
        r = r.add(&positive_part(&guided_factorization(grad, &c)?))?;
    }
    let mut salient: Option<Tensor<T>> = None;
    if cfg.use_fx {
        salient = Some(positive_part(&guided_factorization(x, &c)?));
    }
    if cfg.use_m {
        let m = input_gradient_interaction(x, grad)?;
        salient = Some(match salient {
            Some(s) => s.add(&m)?,
            None => m,
        });
    }
    if let Some(s) = salient {
        let s = s.broadcast_channels(channels)?;
        let s = if cfg.use_gate {
            hadamard(&s, &heaviside_surrogate(&c))?
        } else {
            s
        };
        r = r.add(&s)?;
    }
    delta_shift(&c, &r)
}

/// One linear step. The layer fed by the flatten (`spatial_shape` gives the
/// pre-flatten `C×H×W`) takes the input-gradient interaction as residual;
/// every other linear layer takes none.
pub fn linear_layer_step<T: Scalar>(
    layer: &Layer<T>,
    x: &Tensor<T>,
    grad: &Tensor<T>,
    phi_prev: &Tensor<T>,
    is_first_linear: bool,
    spatial_shape: Option<&[usize]>,
    use_m: bool,
) -> Result<Tensor<T>> {
    if !matches!(layer, Layer::Linear(_)) {
        return Err(Error::Unsupported(format!("linear step on a {} layer", layer.kind())));
    }
    if x.rank() != 1 {
        return Err(Error::Rank {
            op: "linear_layer_step",
            expected: 1,
            shape: x.shape().to_vec(),
        });
    }
    let c = generic_rule(layer, x, phi_prev, &GenericRuleConfig::absolute())?;
    if !is_first_linear || !use_m {
        return delta_shift(&c, &Tensor::zeros(c.shape().to_vec()));
    }
    let shape = spatial_shape
        .ok_or_else(|| Error::Unsupported("first linear layer has no preceding flatten to reshape through".into()))?;
    if shape.len() != 3 || shape.iter().product::<usize>() != x.len() {
        return Err(Error::ShapeMismatch {
            op: "linear_layer_step",
            left: x.shape().to_vec(),
            right: shape.to_vec(),
        });
    }
    let xs = x.clone().reshape(shape.to_vec())?;
    let gs = grad.clone().reshape(shape.to_vec())?;
    let m = input_gradient_interaction(&xs, &gs)?
        .broadcast_channels(shape[0])?
        .reshape(vec![x.len()])?;
    delta_shift(&c, &m)
}

/// Heatmap plus every intermediate attribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Explanation<T> {
    /// Channel sum of the attribution on the image, `H×W`, signed.
    pub heatmap: Tensor<T>,
    /// `Φ⁽¹⁾ … Φ⁽ᴺ⁾` in propagation order.
    pub states: Vec<AttributionState<T>>,
    pub target: usize,
    pub seed: ClassSeed,
}

impl<T: Scalar> Explanation<T> {
    /// Attribution on the (standardized) image, `C×H×W`.
    pub fn input_attribution(&self) -> &Tensor<T> {
        &self.states.last().expect("at least one state").phi
    }
}

/// Runs the method on a raw image.
pub fn explain<T: Scalar>(model: &Model<T>, image: &Tensor<T>, t: usize, cfg: &AgfConfig) -> Result<Explanation<T>> {
    let trace = model.forward(image)?;
    explain_trace(model, &trace, t, cfg)
}

/// Runs the method on an existing forward trace.
pub fn explain_trace<T: Scalar>(
    model: &Model<T>,
    trace: &ForwardTrace<T>,
    t: usize,
    cfg: &AgfConfig,
) -> Result<Explanation<T>> {
    trace.check(model)?;
    let init = initial_attribution(model, trace, t)?;
    explain_from(model, trace, &init, cfg)
}

/// Runs the method from a precomputed seed and gradient trace, so several
/// configurations can share one backward pass.
pub fn explain_from<T: Scalar>(
    model: &Model<T>,
    trace: &ForwardTrace<T>,
    init: &InitialAttribution<T>,
    cfg: &AgfConfig,
) -> Result<Explanation<T>> {
    trace.check(model)?;
    if model.input_shape().len() != 3 {
        return Err(Error::Unsupported("explanations need a C×H×W model input".into()));
    }
    let grads = &init.grads;
    let mut states = Vec::with_capacity(model.len());
    states.push(AttributionState {
        layer: 1,
        phi: init.phi.clone(),
    });
    let mut phi = init.phi.clone();
    for k in (0..model.len() - 1).rev() {
        let layer = model.layer(k);
        let x = trace.input(k);
        let grad = grads.grad(k);
        phi = match layer {
            Layer::Conv2d(_) => conv_layer_step(layer, x, grad, &phi, cfg)?,
            Layer::Linear(_) => {
                let spatial = model.flatten_feeding(k).map(|j| model.layer_input_shape(j));
                linear_layer_step(layer, x, grad, &phi, spatial.is_some(), spatial, cfg.use_m)?
            }
            _ => generic_rule(layer, x, &phi, &GenericRuleConfig::absolute())?,
        }
        .ensure_finite("agf step")?;
        states.push(AttributionState {
            layer: model.index_from_output(k),
            phi: phi.clone(),
        });
    }
    let heatmap = channel_sum_reduce(&phi)?;
    Ok(Explanation {
        heatmap,
        states,
        target: init.target,
        seed: init.seed.clone(),
    })
}
