//! Invariant suite shared by the `selftest` command and the acceptance tests.
//!
//! Each check compares the engine against an independent transcription
//! (finite differences, explicit loops, closed-form normal equations) or
//! verifies a conservation identity on real fixtures.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::agf::{explain_from, initial_attribution, AgfConfig};
use crate::attribution::{generic_rule, GenericRuleConfig};
use crate::backprop::backward;
use crate::error::Result;
use crate::eval::Dataset;
use crate::factorization::{guided_factorization, least_squares_weights, representatives, PartitionMap};
use crate::model::ops::{maxpool2d, PoolGeometry};
use crate::model::{load_modelpack, Conv2d, ForwardTrace, Layer, Linear, Model, Preprocessing};
use crate::tensor::{heaviside_surrogate, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("valid shape")
}

/// A random conv/relu/pool/linear network on `2×6×6` inputs with 3 classes.
/// Odd seeds use max pooling, even seeds average pooling.
pub fn random_tiny_network(seed: u64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = PoolGeometry {
        kernel: 2,
        stride: 2,
        padding: 0,
    };
    let pool_layer = if seed % 2 == 1 {
        Layer::MaxPool2d(pool)
    } else {
        Layer::AvgPool2d(pool)
    };
    let layers = vec![
        Layer::Conv2d(Conv2d {
            weight: uniform(&mut rng, vec![3, 2, 3, 3], 0.6),
            bias: uniform(&mut rng, vec![3], 0.2),
            stride: 1,
            padding: 1,
        }),
        Layer::Relu,
        pool_layer,
        Layer::Conv2d(Conv2d {
            weight: uniform(&mut rng, vec![4, 3, 2, 2], 0.6),
            bias: uniform(&mut rng, vec![4], 0.2),
            stride: 1,
            padding: 0,
        }),
        Layer::Relu,
        Layer::Flatten,
        Layer::Linear(Linear {
            weight: uniform(&mut rng, vec![5, 16], 0.6),
            bias: uniform(&mut rng, vec![5], 0.2),
        }),
        Layer::Relu,
        Layer::Linear(Linear {
            weight: uniform(&mut rng, vec![3, 5], 0.6),
            bias: uniform(&mut rng, vec![3], 0.2),
        }),
    ];
    Model::new(layers, vec![2, 6, 6], 3, Preprocessing::identity()).expect("consistent tiny network")
}

/// ReLU input signs and max-pool winners: the piecewise-linear region an
/// input falls in.
fn activation_pattern(model: &Model<f64>, trace: &ForwardTrace<f64>) -> Result<Vec<Option<usize>>> {
    let mut pattern = Vec::new();
    for (k, layer) in model.layers().iter().enumerate() {
        let x = trace.input(k);
        match layer {
            Layer::Relu => pattern.extend(x.data().iter().map(|&v| Some((v > 0.0) as usize))),
            Layer::MaxPool2d(p) => pattern.extend(maxpool2d(x, *p)?.1),
            _ => {}
        }
    }
    Ok(pattern)
}

/// Result of the finite-difference comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradientOracle {
    /// Largest `‖∇ − ∇_fd‖∞ / ‖∇‖∞` over the networks.
    pub max_relative_error: f64,
    pub networks: usize,
    pub compared: usize,
    /// Coordinates whose `±h` step left the piecewise-linear region, where a
    /// central difference does not estimate the derivative.
    pub skipped: usize,
}

/// Backward pass against central differences of `seed · y(image)` with step
/// `1e-3` on `networks` random networks.
pub fn gradient_oracle(networks: usize, seed: u64) -> Result<GradientOracle> {
    let mut out = GradientOracle::default();
    for s in 0..networks as u64 {
        let model = random_tiny_network(seed.wrapping_add(s));
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 + s));
        let image = uniform(&mut rng, vec![2, 6, 6], 1.0);
        let dir = uniform(&mut rng, vec![3], 1.0);
        let trace = model.forward(&image)?;
        let base = activation_pattern(&model, &trace)?;
        let g = backward(&model, &trace, &dir)?;
        let h = 1e-3;
        let mut err: f64 = 0.0;
        for i in 0..image.len() {
            let mut up = image.clone();
            let mut dn = image.clone();
            up.data_mut()[i] += h;
            dn.data_mut()[i] -= h;
            let (tu, td) = (model.forward(&up)?, model.forward(&dn)?);
            if activation_pattern(&model, &tu)? != base || activation_pattern(&model, &td)? != base {
                out.skipped += 1;
                continue;
            }
            let objective = |t: &ForwardTrace<f64>| {
                t.logits()
                    .data()
                    .iter()
                    .zip(dir.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };
            let fd = (objective(&tu) - objective(&td)) / (2.0 * h);
            err = err.max((fd - g.input_grad().data()[i]).abs());
            out.compared += 1;
        }
        let scale = g.input_grad().max_abs().max(1e-12);
        out.max_relative_error = out.max_relative_error.max(err / scale);
        out.networks += 1;
    }
    Ok(out)
}

/// Largest absolute gap between the generic rule and a direct double loop
/// over random `4 → 3` linear layers with `X = |x|, Θ = |θ|`.
pub fn generic_rule_oracle(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = GenericRuleConfig::absolute().eps();
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let w = uniform(&mut rng, vec![3, 4], 1.0);
        let x = uniform(&mut rng, vec![4], 1.0);
        let r = uniform(&mut rng, vec![3], 1.0);
        let layer = Layer::Linear(Linear {
            weight: w.clone(),
            bias: uniform(&mut rng, vec![3], 1.0),
        });
        let got = generic_rule(&layer, &x, &r, &GenericRuleConfig::absolute())?;
        for j in 0..4 {
            let mut want = 0.0;
            for i in 0..3 {
                let mut z = 0.0;
                for jj in 0..4 {
                    z += x.data()[jj].abs() * w.data()[i * 4 + jj].abs();
                }
                let z = if z > 0.0 {
                    z + eps
                } else if z < 0.0 {
                    z - eps
                } else {
                    0.0
                };
                if z != 0.0 {
                    want += x.data()[j].abs() * w.data()[i * 4 + j].abs() * r.data()[i] / z;
                }
            }
            worst = worst.max((got.data()[j] - want).abs());
        }
    }
    Ok(worst)
}

/// Outcome of the factorization checks.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizationOracle {
    /// Worst normal-equation residual over random instances, pre-clipping.
    pub residual: f64,
    /// `F` on the two-pixel separable fixture.
    pub separable: [f64; 2],
    /// Every pixel of every separable synthetic has `sign(F) = sign(φ)`.
    pub signs_agree: bool,
}

pub fn factorization_oracle(instances: usize, seed: u64) -> Result<FactorizationOracle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut residual: f64 = 0.0;
    for k in 0..instances {
        let (c, n) = (2 + k % 7, 16);
        let h = heaviside_surrogate(&uniform(&mut rng, vec![c, n], 3.0));
        let phi = PartitionMap::new(uniform(&mut rng, vec![1, n], 1.0))?;
        let (fg, bg) = representatives(&h, &phi)?;
        let Some([wb, wf]) = least_squares_weights(&bg, &fg, &h)? else {
            continue;
        };
        let g = [[dot(&bg, &bg), dot(&bg, &fg)], [dot(&fg, &bg), dot(&fg, &fg)]];
        let lambda = 1e-6 * (g[0][0] + g[1][1]) / 2.0;
        for col in 0..n {
            let hc: Vec<f64> = (0..c).map(|ch| h.data()[ch * n + col]).collect();
            let rhs = [dot(&bg, &hc), dot(&fg, &hc)];
            let lhs = [
                (g[0][0] + lambda) * wb[col] + g[0][1] * wf[col],
                g[1][0] * wb[col] + (g[1][1] + lambda) * wf[col],
            ];
            residual = residual.max((lhs[0] - rhs[0]).abs()).max((lhs[1] - rhs[1]).abs());
        }
    }

    let y = Tensor::from_f64(vec![2, 1, 2], &[2., -2., -2., 2.])?;
    let guide = Tensor::from_f64(vec![2, 1, 2], &[1., -1., 1., -1.])?;
    let f = guided_factorization(&y, &guide)?;
    let separable = [f.data()[0], f.data()[1]];

    let mut signs_agree = true;
    for _ in 0..instances {
        let c = rng.gen_range(2..6);
        let n = rng.gen_range(4..24);
        let mut signs: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        signs[0] = true;
        signs[1] = false;
        let mut yv = vec![0.0; c * n];
        let mut gv = vec![0.0; c * n];
        for ch in 0..c {
            for (i, &fg) in signs.iter().enumerate() {
                let high = fg == (ch % 2 == 0);
                yv[ch * n + i] = if high {
                    rng.gen_range(4.0..5.0)
                } else {
                    rng.gen_range(-5.0..-4.0)
                };
                gv[ch * n + i] = if fg {
                    rng.gen_range(0.1..1.0)
                } else {
                    -rng.gen_range(0.1..1.0)
                };
            }
        }
        let f = guided_factorization(&Tensor::new(vec![c, 1, n], yv)?, &Tensor::new(vec![c, 1, n], gv)?)?;
        signs_agree &= signs.iter().zip(f.data()).all(|(&s, &v)| (v > 0.0) == s);
    }
    Ok(FactorizationOracle {
        residual,
        separable,
        signs_agree,
    })
}

/// Worst relative conservation errors of one or more explanations.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConservationStats {
    /// `max |ΣΦ⁽ⁿ⁾ − ΣΦ⁽ⁿ⁻¹⁾| / |ΣΦ⁽ⁿ⁻¹⁾|` over steps.
    pub layer: f64,
    /// `|Σ heatmap − ΣΦ¹| / |ΣΦ¹|`.
    pub end_to_end: f64,
    pub explanations: usize,
}

impl ConservationStats {
    pub fn merge(self, other: Self) -> Self {
        Self {
            layer: self.layer.max(other.layer),
            end_to_end: self.end_to_end.max(other.end_to_end),
            explanations: self.explanations + other.explanations,
        }
    }
}

fn relative(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / b.abs().max(f64::MIN_POSITIVE)
    }
}

/// Explains every image for every class under every ablation variant.
pub fn conservation(model: &Model<f64>, images: &[Tensor<f64>]) -> Result<ConservationStats> {
    let mut stats = ConservationStats::default();
    for img in images {
        let trace = model.forward(img)?;
        for t in 0..model.class_count() {
            let init = initial_attribution(model, &trace, t)?;
            for (_, cfg) in AgfConfig::variants() {
                let e = explain_from(model, &trace, &init, &cfg)?;
                for w in e.states.windows(2) {
                    stats.layer = stats.layer.max(relative(w[1].phi.sum(), w[0].phi.sum()));
                }
                stats.end_to_end = stats.end_to_end.max(relative(e.heatmap.sum(), e.states[0].phi.sum()));
                stats.explanations += 1;
            }
        }
    }
    Ok(stats)
}

#[derive(Deserialize)]
struct ReferenceLogits {
    images: Vec<ReferenceImage>,
}

#[derive(Deserialize)]
struct ReferenceImage {
    file: String,
    logits: Vec<f64>,
}

/// Largest per-class gap between engine logits and the exporter's record.
pub fn reference_logit_gap(model: &Model<f64>, reference_json: &Path, image_dir: &Path) -> Result<f64> {
    let refs: ReferenceLogits = serde_json::from_str(&std::fs::read_to_string(reference_json)?)?;
    let mut worst: f64 = 0.0;
    for r in &refs.images {
        let img = crate::eval::load_image(image_dir.join(&r.file), model.input_shape()[0])?;
        let y = model.forward(&img)?.logits().clone();
        for (a, b) in y.data().iter().zip(&r.logits) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Runs every check. With `fixtures`, conservation and logit agreement are
/// verified on the shipped toy model; otherwise on random networks.
pub fn run(fixtures: Option<&Path>) -> Result<SelftestReport> {
    let mut report = SelftestReport::default();

    let g = generic_rule_oracle(100, 7)?;
    report.push(
        "generic rule vs double loop",
        g <= 1e-6,
        format!("max abs diff {g:.3e}"),
    );

    let d = gradient_oracle(10, 11)?;
    report.push(
        "gradient vs finite differences",
        d.max_relative_error <= 1e-3 && d.compared > 0,
        format!(
            "max rel err {:.3e} over {} coordinates ({} at kinks skipped)",
            d.max_relative_error, d.compared, d.skipped
        ),
    );

    let f = factorization_oracle(50, 13)?;
    let sep_ok = (f.separable[0] - 1.0).abs() <= 1e-3 && (f.separable[1] + 1.0).abs() <= 1e-3;
    report.push(
        "factorization",
        f.residual <= 1e-6 && sep_ok && f.signs_agree,
        format!(
            "residual {:.3e}, separable F = [{:.4}, {:.4}], sign agreement {}",
            f.residual, f.separable[0], f.separable[1], f.signs_agree
        ),
    );

    let stats = match fixtures {
        Some(dir) => {
            let model: Model<f64> = load_modelpack(dir.join("models/toy_cnn.npk"))?;
            let gap = reference_logit_gap(
                &model,
                &dir.join("models/reference_logits.json"),
                &dir.join("data/shapes/images"),
            )?;
            report.push("reference logits", gap <= 1e-4, format!("max gap {gap:.3e}"));
            let data = Dataset::<f64>::load(dir.join("data/shapes"), model.input_shape()[0])?;
            let images: Vec<_> = data.images().iter().take(4).map(|i| i.image.clone()).collect();
            conservation(&model, &images)?
        }
        None => {
            let mut stats = ConservationStats::default();
            for s in 0..4 {
                let model = random_tiny_network(s);
                let mut rng = ChaCha8Rng::seed_from_u64(500 + s);
                stats = stats.merge(conservation(&model, &[uniform(&mut rng, vec![2, 6, 6], 1.0)])?);
            }
            stats
        }
    };
    report.push(
        "conservation",
        stats.layer <= 1e-5 && stats.end_to_end <= 1e-4,
        format!(
            "{} explanations, layer {:.3e}, end-to-end {:.3e}",
            stats.explanations, stats.layer, stats.end_to_end
        ),
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_without_fixtures() {
        let r = run(None).unwrap();
        for c in &r.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
