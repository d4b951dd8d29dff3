//! Attribution-guided two-class factorization.
//!
//! A `C×H×W` tensor is squashed into `(0, 1)`, viewed as a `C×HW` matrix `H`,
//! and approximated as `H ≈ R·W` with two representative columns
//! `R = [R_b R_f]` (background and foreground channel means, split by the sign
//! of a partition map) and non-negative spatial weights `W`. The signed map
//! `W_f − W_b` says, per pixel, how much more the data looks like the
//! foreground than the background.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{channel_mean_reduce, heaviside_surrogate, normalize_max, Tensor};

/// Signed `H×W` map: `φ > 0` is foreground, `φ ≤ 0` background.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionMap<T>(Tensor<T>);

impl<T: Scalar> PartitionMap<T> {
    pub fn new(phi: Tensor<T>) -> Result<Self> {
        phi.dims2("partition map")?;
        Ok(Self(phi.ensure_finite("partition map")?))
    }

    /// Channel mean of a `C×H×W` guide.
    pub fn from_guide(guide: &Tensor<T>) -> Result<Self> {
        Self::new(channel_mean_reduce(guide)?)
    }

    pub fn map(&self) -> &Tensor<T> {
        &self.0
    }

    fn is_foreground(&self, i: usize) -> bool {
        self.0.data()[i] > T::zero()
    }
}

/// Per-channel means of the `C×HW` matrix `h` over foreground and background
/// columns. An empty side gives a zero vector.
pub fn representatives<T: Scalar>(h: &Tensor<T>, phi: &PartitionMap<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (c, n) = h.dims2("representatives")?;
    if phi.map().len() != n {
        return Err(Error::ShapeMismatch {
            op: "representatives",
            left: h.shape().to_vec(),
            right: phi.map().shape().to_vec(),
        });
    }
    let n_fg = (0..n).filter(|&i| phi.is_foreground(i)).count();
    let n_bg = n - n_fg;
    let mut fg = vec![0.0; c];
    let mut bg = vec![0.0; c];
    for ch in 0..c {
        let row = &h.data()[ch * n..(ch + 1) * n];
        for (i, v) in row.iter().enumerate() {
            if phi.is_foreground(i) {
                fg[ch] += v.as_f64();
            } else {
                bg[ch] += v.as_f64();
            }
        }
        if n_fg > 0 {
            fg[ch] /= n_fg as f64;
        }
        if n_bg > 0 {
            bg[ch] /= n_bg as f64;
        }
    }
    Ok((fg, bg))
}

/// Unclipped ridge least-squares weights `(RᵀR + λI)⁻¹ Rᵀ H` with
/// `R = [bg fg]` and `λ = 1e-6 · trace(RᵀR) / 2`. Rows are `(b, f)`, each of
/// length `HW`; `None` when `R` is entirely zero.
pub fn least_squares_weights<T: Scalar>(bg: &[f64], fg: &[f64], h: &Tensor<T>) -> Result<Option<[Vec<f64>; 2]>> {
    let (c, n) = h.dims2("solve_weights")?;
    if bg.len() != c || fg.len() != c {
        return Err(Error::ShapeMismatch {
            op: "solve_weights",
            left: vec![bg.len(), fg.len()],
            right: h.shape().to_vec(),
        });
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (gbb, gbf, gff) = (dot(bg, bg), dot(bg, fg), dot(fg, fg));
    let trace = gbb + gff;
    if trace == 0.0 {
        return Ok(None);
    }
    let lambda = 1e-6 * trace / 2.0;
    let (a, b, d) = (gbb + lambda, gbf, gff + lambda);
    let det = a * d - b * b;
    // inverse of [[a, b], [b, d]]
    let (i00, i01, i11) = (d / det, -b / det, a / det);
    let mut wb = vec![0.0; n];
    let mut wf = vec![0.0; n];
    for col in 0..n {
        let (mut rb, mut rf) = (0.0, 0.0);
        for ch in 0..c {
            let v = h.data()[ch * n + col].as_f64();
            rb += bg[ch] * v;
            rf += fg[ch] * v;
        }
        wb[col] = i00 * rb + i01 * rf;
        wf[col] = i01 * rb + i11 * rf;
    }
    Ok(Some([wb, wf]))
}

/// Non-negative spatial weights `(W_b, W_f)`: [`least_squares_weights`]
/// followed by the positive part.
pub fn solve_weights<T: Scalar>(bg: &[f64], fg: &[f64], h: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = h.dims2("solve_weights")?.1;
    Ok(match least_squares_weights(bg, fg, h)? {
        Some([wb, wf]) => (
            wb.into_iter().map(|v| v.max(0.0)).collect(),
            wf.into_iter().map(|v| v.max(0.0)).collect(),
        ),
        None => (vec![0.0; n], vec![0.0; n]),
    })
}

/// Full factorization output.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizationResult<T> {
    pub fg_representative: Vec<f64>,
    pub bg_representative: Vec<f64>,
    pub fg_weights: Vec<f64>,
    pub bg_weights: Vec<f64>,
    /// `W_f − W_b` as `H×W`.
    pub signed: Tensor<T>,
}

/// Factorizes `y` (`C×H×W`) under the partition given by the sign of the
/// channel mean of `guide` (same shape), after scaling `y` by its maximum.
pub fn factorize<T: Scalar>(y: &Tensor<T>, guide: &Tensor<T>) -> Result<FactorizationResult<T>> {
    let (c, hh, ww) = y.dims3("guided_factorization")?;
    if guide.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "guided_factorization",
            left: y.shape().to_vec(),
            right: guide.shape().to_vec(),
        });
    }
    let phi = PartitionMap::from_guide(guide)?.0.reshape(vec![hh * ww])?;
    let phi = PartitionMap(phi);
    let h = heaviside_surrogate(&normalize_max(y)).reshape(vec![c, hh * ww])?;
    let (fg, bg) = representatives(&h, &phi)?;
    let (wb, wf) = solve_weights(&bg, &fg, &h)?;
    let signed = Tensor::new(vec![hh, ww], wf.iter().zip(&wb).map(|(f, b)| T::of(f - b)).collect())?;
    Ok(FactorizationResult {
        fg_representative: fg,
        bg_representative: bg,
        fg_weights: wf,
        bg_weights: wb,
        signed,
    })
}

/// `W_f − W_b` of [`factorize`], as an `H×W` map.
pub fn guided_factorization<T: Scalar>(y: &Tensor<T>, guide: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(factorize(y, guide)?.signed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    fn phi(v: &[f64]) -> PartitionMap<f64> {
        PartitionMap(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn representatives_single_column_partitions() {
        let (s2, sm2) = (sigmoid(2.0f64), sigmoid(-2.0f64));
        let h = t(&[2, 2], &[s2, sm2, sm2, s2]);
        let (fg, bg) = representatives(&h, &phi(&[1.0, -1.0])).unwrap();
        assert_eq!(fg, vec![s2, sm2]);
        assert_eq!(bg, vec![sm2, s2]);
        assert!((fg[0] - 0.8808).abs() < 5e-5 && (fg[1] - 0.1192).abs() < 5e-5);
    }

    #[test]
    fn representatives_guards() {
        let h = t(&[2, 3], &[0.5; 6]);
        let (fg, bg) = representatives(&h, &phi(&[1.0, 2.0, 0.1])).unwrap();
        assert_eq!(bg, vec![0.0, 0.0]);
        assert_eq!(fg, vec![0.5, 0.5]);
        let (fg, bg) = representatives(&h, &phi(&[1.0, -2.0, 0.0])).unwrap();
        assert_eq!(fg, vec![0.5, 0.5]);
        assert_eq!(bg, vec![0.5, 0.5]);
    }

    #[test]
    fn exact_reconstruction() {
        let (fg, bg) = (vec![0.9, 0.2, 0.4], vec![0.1, 0.7, 0.3]);
        // column 0 is R_f, column 1 is R_b
        let h = t(&[3, 2], &[0.9, 0.1, 0.2, 0.7, 0.4, 0.3]);
        let (wb, wf) = solve_weights(&bg, &fg, &h).unwrap();
        assert!((wf[0] - 1.0).abs() < 1e-3 && wf[1].abs() < 1e-3);
        assert!(wb[0].abs() < 1e-3 && (wb[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn zero_data_and_zero_representatives() {
        let h = Tensor::<f64>::zeros(vec![2, 3]);
        let (wb, wf) = solve_weights(&[0.3, 0.1], &[0.2, 0.5], &h).unwrap();
        assert!(wb.iter().chain(&wf).all(|&v| v == 0.0));
        let h = t(&[2, 1], &[0.3, 0.2]);
        assert_eq!(
            solve_weights(&[0.0, 0.0], &[0.0, 0.0], &h).unwrap(),
            (vec![0.0], vec![0.0])
        );
    }

    #[allow(clippy::needless_range_loop)]
    fn normal_equation_residual(bg: &[f64], fg: &[f64], h: &Tensor<f64>, w: &[Vec<f64>; 2]) -> f64 {
        let (c, n) = h.dims2("").unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let g = [[dot(bg, bg), dot(bg, fg)], [dot(fg, bg), dot(fg, fg)]];
        let lambda = 1e-6 * (g[0][0] + g[1][1]) / 2.0;
        let mut worst: f64 = 0.0;
        for col in 0..n {
            let col_h: Vec<f64> = (0..c).map(|ch| h.data()[ch * n + col]).collect();
            let rhs = [dot(bg, &col_h), dot(fg, &col_h)];
            for row in 0..2 {
                let lhs = (g[row][0] + if row == 0 { lambda } else { 0.0 }) * w[0][col]
                    + (g[row][1] + if row == 1 { lambda } else { 0.0 }) * w[1][col];
                worst = worst.max((lhs - rhs[row]).abs());
            }
        }
        worst
    }

    #[test]
    fn random_instance_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(416);
        let vals: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let h = t(&[4, 16], &vals);
        let p: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (fg, bg) = representatives(&h, &phi(&p)).unwrap();
        let w = least_squares_weights(&bg, &fg, &h).unwrap().unwrap();
        assert!(normal_equation_residual(&bg, &fg, &h, &w) <= 1e-6);
    }

    #[test]
    fn separable_pipeline_gives_plus_minus_one() {
        let y = t(&[2, 1, 2], &[2., -2., -2., 2.]);
        let guide = t(&[2, 1, 2], &[1., -1., 1., -1.]);
        let f = guided_factorization(&y, &guide).unwrap();
        assert!((f.data()[0] - 1.0).abs() < 1e-3, "{:?}", f.data());
        assert!((f.data()[1] + 1.0).abs() < 1e-3, "{:?}", f.data());
    }

    #[test]
    fn zero_input_and_all_foreground() {
        let guide = t(&[2, 1, 2], &[1., -1., 1., -1.]);
        let f = guided_factorization(&Tensor::<f64>::zeros(vec![2, 1, 2]), &guide).unwrap();
        // normalize_max zeroes Y, sigmoid gives 0.5 everywhere, R_f = R_b
        assert!(f.data().iter().all(|v| v.abs() < 1e-9));
        let y = t(&[2, 1, 3], &[0.3, -1., 2., 1., 0.5, -0.2]);
        let r = factorize(&y, &Tensor::ones(vec![2, 1, 3])).unwrap();
        assert!(r.bg_representative.iter().all(|&v| v == 0.0));
        assert!(r.signed.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rejects_shape_mismatch() {
        assert!(guided_factorization(&Tensor::<f64>::zeros(vec![2, 2, 2]), &Tensor::zeros(vec![2, 2, 3])).is_err());
        assert!(guided_factorization(&Tensor::<f64>::zeros(vec![4]), &Tensor::zeros(vec![4])).is_err());
    }

    proptest! {
        #[test]
        fn residual_bound_holds_for_random_instances(c in 2usize..=8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 16;
            let vals: Vec<f64> = (0..c * n).map(|_| sigmoid(rng.gen_range(-3.0..3.0))).collect();
            let h = t(&[c, n], &vals);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (fg, bg) = representatives(&h, &phi(&p)).unwrap();
            if let Some(w) = least_squares_weights(&bg, &fg, &h).unwrap() {
                prop_assert!(normal_equation_residual(&bg, &fg, &h, &w) <= 1e-6);
            }
            let (wb, wf) = solve_weights(&bg, &fg, &h).unwrap();
            prop_assert!(wb.iter().chain(&wf).all(|&v| v >= 0.0));
        }

        #[test]
        fn separable_sign_agreement(
            c in 2usize..6,
            signs in prop::collection::vec(any::<bool>(), 2..24),
            seed in any::<u64>(),
        ) {
            prop_assume!(signs.iter().any(|&s| s) && signs.iter().any(|&s| !s));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = signs.len();
            // even channels respond on the foreground, odd channels on the background
            let mut y = vec![0.0; c * n];
            let mut guide = vec![0.0; c * n];
            for ch in 0..c {
                for (i, &fg) in signs.iter().enumerate() {
                    let high = fg == (ch % 2 == 0);
                    y[ch * n + i] = if high { rng.gen_range(4.0..5.0) } else { rng.gen_range(-5.0..-4.0) };
                    guide[ch * n + i] = if fg { rng.gen_range(0.1..1.0) } else { -rng.gen_range(0.1..1.0) };
                }
            }
            let f = guided_factorization(&t(&[c, 1, n], &y), &t(&[c, 1, n], &guide)).unwrap();
            for (i, &fg) in signs.iter().enumerate() {
                prop_assert_eq!(f.data()[i] > 0.0, fg);
            }
        }

        #[test]
        fn pixel_permutation_commutes(perm_seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            let (c, n) = (3, 10);
            let y: Vec<f64> = (0..c * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let g: Vec<f64> = (0..c * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let permute = |v: &[f64]| -> Vec<f64> {
                (0..c).flat_map(|ch| perm.iter().map(move |&p| v[ch * n + p])).collect()
            };
            let f = guided_factorization(&t(&[c, 1, n], &y), &t(&[c, 1, n], &g)).unwrap();
            let fp = guided_factorization(&t(&[c, 1, n], &permute(&y)), &t(&[c, 1, n], &permute(&g))).unwrap();
            // summation order changes, and a near-singular R amplifies that
            let scale = 1.0 + f.max_abs();
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((fp.data()[i] - f.data()[p]).abs() < 1e-9 * scale, "{} vs {}", fp.data()[i], f.data()[p]);
            }
        }
    }
}
