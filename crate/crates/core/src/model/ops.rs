//! Direct-loop kernels for the supported layers and their adjoints.
//!
//! The adjoint (`*_transpose`) kernels are shared by gradient propagation and
//! the relevance rules: both push a signal on a layer's output back through
//! the layer's linear map.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial output extent of a sliding window, `None` if the window never fits.
pub fn window_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Convolution hyperparameters shared by the forward kernel and its adjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn from_weight(weight_shape: &[usize], stride: usize, padding: usize) -> Result<Self> {
        match *weight_shape {
            [o, i, kh, kw] => Ok(Self {
                in_channels: i,
                out_channels: o,
                kernel_h: kh,
                kernel_w: kw,
                stride,
                padding,
            }),
            _ => Err(Error::Rank {
                op: "conv2d weight",
                expected: 4,
                shape: weight_shape.to_vec(),
            }),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            window_out(h, self.kernel_h, self.stride, self.padding)?,
            window_out(w, self.kernel_w, self.stride, self.padding)?,
        ))
    }
}

/// Output positions `o < n_out` whose tap `o·stride + k − padding` lands
/// inside `0..n_in`.
fn valid_range(k: usize, padding: usize, stride: usize, n_in: usize, n_out: usize) -> std::ops::Range<usize> {
    let lo = padding.saturating_sub(k).div_ceil(stride);
    let hi = if n_in + padding > k {
        ((n_in + padding - k - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// Patch matrix of shape `(C·Kh·Kw) × (Ho·Wo)`; padded taps are zero.
fn im2col<T: Scalar>(x: &[T], (c, h, w): (usize, usize, usize), g: &ConvGeometry, (ho, wo): (usize, usize)) -> Vec<T> {
    let (kh, kw, s, p) = (g.kernel_h, g.kernel_w, g.stride, g.padding);
    let mut cols = Vec::with_capacity(c * kh * kw * ho * wo);
    for ci in 0..c {
        for ky in 0..kh {
            let oys = valid_range(ky, p, s, h, ho);
            for kx in 0..kw {
                let oxs = valid_range(kx, p, s, w, wo);
                cols.resize(cols.len() + oys.start * wo, T::zero());
                for oy in oys.clone() {
                    let src = &x[(ci * h + oy * s + ky - p) * w..][..w];
                    cols.resize(cols.len() + oxs.start, T::zero());
                    if s == 1 {
                        let from = oxs.start + kx - p;
                        cols.extend_from_slice(&src[from..from + oxs.len()]);
                    } else {
                        cols.extend(oxs.clone().map(|ox| src[ox * s + kx - p]));
                    }
                    cols.resize(cols.len() + wo - oxs.end, T::zero());
                }
                cols.resize(cols.len() + (ho - oys.end) * wo, T::zero());
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: sums every patch entry back onto its pixel.
fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    g: &ConvGeometry,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let (kh, kw, s, p) = (g.kernel_h, g.kernel_w, g.stride, g.padding);
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for ky in 0..kh {
            let oys = valid_range(ky, p, s, h, ho);
            for kx in 0..kw {
                let oxs = valid_range(kx, p, s, w, wo);
                let row = &cols[((ci * kh + ky) * kw + kx) * ho * wo..][..ho * wo];
                for oy in oys.clone() {
                    let dst = &mut out[(ci * h + oy * s + ky - p) * w..][..w];
                    let src = &row[oy * wo..][..wo];
                    if s == 1 {
                        let from = oxs.start + kx - p;
                        for (d, &v) in dst[from..from + oxs.len()].iter_mut().zip(&src[oxs.clone()]) {
                            *d = *d + v;
                        }
                    } else {
                        for ox in oxs.clone() {
                            let d = &mut dst[ox * s + kx - p];
                            *d = *d + src[ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2-D cross-correlation with zero padding. `bias` is optional so the
/// relevance rules can evaluate the bias-free pre-activation.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::from_weight(weight.shape(), stride, padding)?;
    let (c, h, w) = x.dims3("conv2d")?;
    if c != g.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: x.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let (ho, wo) = g.output_hw(h, w).ok_or_else(|| Error::ShapeMismatch {
        op: "conv2d",
        left: x.shape().to_vec(),
        right: weight.shape().to_vec(),
    })?;
    let cols = im2col(x.data(), (c, h, w), &g, (ho, wo));
    let mut out = T::gemm(
        g.out_channels,
        c * g.kernel_h * g.kernel_w,
        ho * wo,
        weight.data(),
        false,
        &cols,
    );
    if let Some(b) = bias {
        for (plane, &bo) in out.chunks_mut(ho * wo).zip(b.data()) {
            plane.iter_mut().for_each(|v| *v = *v + bo);
        }
    }
    Tensor::new(vec![g.out_channels, ho, wo], out)
}

/// Adjoint of [`conv2d`] with respect to its input: scatters an output-shaped
/// signal back onto an input of shape `in_shape`.
pub fn conv2d_transpose<T: Scalar>(
    g_out: &Tensor<T>,
    weight: &Tensor<T>,
    in_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::from_weight(weight.shape(), stride, padding)?;
    let (c, h, w) = match *in_shape {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::Rank {
                op: "conv2d_transpose",
                expected: 3,
                shape: in_shape.to_vec(),
            })
        }
    };
    let (o_ch, ho, wo) = g_out.dims3("conv2d_transpose")?;
    if o_ch != g.out_channels || c != g.in_channels || g.output_hw(h, w) != Some((ho, wo)) {
        return Err(Error::ShapeMismatch {
            op: "conv2d_transpose",
            left: g_out.shape().to_vec(),
            right: in_shape.to_vec(),
        });
    }
    let rows = c * g.kernel_h * g.kernel_w;
    let cols = T::gemm(rows, o_ch, ho * wo, weight.data(), true, g_out.data());
    let out = col2im(&cols, (c, h, w), &g, (ho, wo));
    Tensor::new(in_shape.to_vec(), out)
}

/// `weight · x (+ bias)` for `weight` of shape `O×I`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (o, i) = weight.dims2("linear weight")?;
    if x.rank() != 1 || x.len() != i {
        return Err(Error::ShapeMismatch {
            op: "linear",
            left: x.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let (xd, wd) = (x.data(), weight.data());
    let out = (0..o)
        .map(|r| {
            let b = bias.map_or(T::zero(), |b| b.data()[r]);
            wd[r * i..(r + 1) * i]
                .iter()
                .zip(xd)
                .fold(b, |acc, (&a, &v)| acc + a * v)
        })
        .collect();
    Ok(Tensor::vector(out))
}

/// `weightᵀ · g`.
pub fn linear_transpose<T: Scalar>(g_out: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let (o, i) = weight.dims2("linear weight")?;
    if g_out.rank() != 1 || g_out.len() != o {
        return Err(Error::ShapeMismatch {
            op: "linear_transpose",
            left: g_out.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let wd = weight.data();
    let mut out = vec![T::zero(); i];
    for (r, &g) in g_out.data().iter().enumerate() {
        if g.is_zero() {
            continue;
        }
        for (acc, &a) in out.iter_mut().zip(&wd[r * i..(r + 1) * i]) {
            *acc = *acc + a * g;
        }
    }
    Ok(Tensor::vector(out))
}

/// Square pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolGeometry {
    pub fn output_shape(&self, in_shape: &[usize]) -> Option<Vec<usize>> {
        match *in_shape {
            [c, h, w] => Some(vec![
                c,
                window_out(h, self.kernel, self.stride, self.padding)?,
                window_out(w, self.kernel, self.stride, self.padding)?,
            ]),
            _ => None,
        }
    }

    /// Visits every output cell with the flat input indices of its window;
    /// `None` marks a padded position.
    fn for_each_window(&self, in_shape: &[usize], mut f: impl FnMut(usize, &[Option<usize>])) -> Result<Vec<usize>> {
        let out_shape = self.output_shape(in_shape).ok_or_else(|| Error::Rank {
            op: "pool",
            expected: 3,
            shape: in_shape.to_vec(),
        })?;
        let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        let (ho, wo) = (out_shape[1], out_shape[2]);
        let p = self.padding as isize;
        let mut window = Vec::with_capacity(self.kernel * self.kernel);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    window.clear();
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - p;
                            let ix = (ox * self.stride + kx) as isize - p;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                window.push(None);
                            } else {
                                window.push(Some((ch * h + iy as usize) * w + ix as usize));
                            }
                        }
                    }
                    f((ch * ho + oy) * wo + ox, &window);
                }
            }
        }
        Ok(out_shape)
    }
}

/// Max pooling; padded positions read as zero. Also returns, per output cell,
/// the input index of the first maximum in row-major window order (`None`
/// when a padded zero wins).
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, pool: PoolGeometry) -> Result<(Tensor<T>, Vec<Option<usize>>)> {
    let mut vals = Vec::new();
    let mut arg = Vec::new();
    let shape = scan_max(x, pool, |v, idx| {
        vals.push(v);
        arg.push(idx);
    })?;
    Ok((Tensor::new(shape, vals)?, arg))
}

/// Calls `f(max, argmax)` for every output cell in order; returns the
/// output shape.
fn scan_max<T: Scalar>(x: &Tensor<T>, pool: PoolGeometry, mut f: impl FnMut(T, Option<usize>)) -> Result<Vec<usize>> {
    let out_shape = pool.output_shape(x.shape()).ok_or_else(|| Error::Rank {
        op: "maxpool2d",
        expected: 3,
        shape: x.shape().to_vec(),
    })?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let (k, s, p) = (pool.kernel, pool.stride, pool.padding);
    let xd = x.data();
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best: Option<(T, Option<usize>)> = None;
                for ky in 0..k {
                    for kx in 0..k {
                        let (iy, ix) = ((oy * s + ky).wrapping_sub(p), (ox * s + kx).wrapping_sub(p));
                        let idx = (iy < h && ix < w).then(|| (ch * h + iy) * w + ix);
                        let v = idx.map_or(T::zero(), |i| xd[i]);
                        if best.is_none_or(|(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                let (v, idx) = best.expect("pool window is never empty");
                f(v, idx);
            }
        }
    }
    Ok(out_shape)
}

/// Sends each output cell's value entirely to its window's argmax input.
pub fn maxpool2d_route<T: Scalar>(g_out: &Tensor<T>, x: &Tensor<T>, pool: PoolGeometry) -> Result<Tensor<T>> {
    let expected = pool.output_shape(x.shape());
    if expected.as_deref() != Some(g_out.shape()) {
        return Err(Error::ShapeMismatch {
            op: "maxpool2d_route",
            left: g_out.shape().to_vec(),
            right: expected.unwrap_or_else(|| x.shape().to_vec()),
        });
    }
    let gd = g_out.data();
    let mut res = vec![T::zero(); x.len()];
    let mut cell = 0;
    scan_max(x, pool, |_, idx| {
        if let Some(i) = idx {
            res[i] = res[i] + gd[cell];
        }
        cell += 1;
    })?;
    Tensor::new(x.shape().to_vec(), res)
}

/// Average pooling; the divisor is always the full window area.
pub fn avgpool2d<T: Scalar>(x: &Tensor<T>, pool: PoolGeometry) -> Result<Tensor<T>> {
    let xd = x.data();
    let area = T::of((pool.kernel * pool.kernel) as f64);
    let mut vals = Vec::new();
    let shape = pool.for_each_window(x.shape(), |_, window| {
        let s = window.iter().flatten().fold(T::zero(), |acc, &i| acc + xd[i]);
        vals.push(s / area);
    })?;
    Tensor::new(shape, vals)
}

/// Adjoint of [`avgpool2d`].
pub fn avgpool2d_transpose<T: Scalar>(g_out: &Tensor<T>, in_shape: &[usize], pool: PoolGeometry) -> Result<Tensor<T>> {
    let area = T::of((pool.kernel * pool.kernel) as f64);
    let gd = g_out.data();
    let mut res = vec![T::zero(); in_shape.iter().product()];
    let shape = pool.for_each_window(in_shape, |o, window| {
        if o >= gd.len() {
            return;
        }
        let share = gd[o] / area;
        for &i in window.iter().flatten() {
            res[i] = res[i] + share;
        }
    })?;
    if shape != g_out.shape() {
        return Err(Error::ShapeMismatch {
            op: "avgpool2d_transpose",
            left: g_out.shape().to_vec(),
            right: shape,
        });
    }
    Tensor::new(in_shape.to_vec(), res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct six-loop convolution used as an oracle.
    fn conv_oracle(x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Vec<f64> {
        let (c, h, w) = x.dims3("").unwrap();
        let (o, kh, kw) = (wt.shape()[0], wt.shape()[2], wt.shape()[3]);
        let ho = (h + 2 * p - kh) / s + 1;
        let wo = (w + 2 * p - kw) / s + 1;
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * s + ky) as i64 - p as i64;
                                let ix = (xx * s + kx) as i64 - p as i64;
                                if iy >= 0 && ix >= 0 && iy < h as i64 && ix < w as i64 {
                                    acc += wt.data()[((oc * c + ic) * kh + ky) * kw + kx]
                                        * x.data()[(ic * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(oc * ho + y) * wo + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(s, p) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let x = random(&[3, 8, 8], &mut rng);
            let wt = random(&[4, 3, 3, 3], &mut rng);
            let b = random(&[4], &mut rng);
            let got = conv2d(&x, &wt, Some(&b), s, p).unwrap();
            let want = conv_oracle(&x, &wt, &b, s, p);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() <= 1e-5 * w.abs().max(1.0));
            }
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        // <conv(x), g> == <x, convᵀ(g)>
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(s, p) in &[(1, 1), (2, 1), (2, 0)] {
            let x = random(&[2, 7, 6], &mut rng);
            let wt = random(&[3, 2, 3, 3], &mut rng);
            let y = conv2d(&x, &wt, None, s, p).unwrap();
            let g = random(y.shape(), &mut rng);
            let xt = conv2d_transpose(&g, &wt, x.shape(), s, p).unwrap();
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(xt.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
        let x = random(&[5], &mut rng);
        let wt = random(&[3, 5], &mut rng);
        let g = random(&[3], &mut rng);
        let lhs: f64 = linear(&x, &wt, None)
            .unwrap()
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(linear_transpose(&g, &wt).unwrap().data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pools_match_window_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[2, 6, 6], &mut rng);
        let pool = PoolGeometry {
            kernel: 2,
            stride: 2,
            padding: 0,
        };
        let (mx, _) = maxpool2d(&x, pool).unwrap();
        let avg = avgpool2d(&x, pool).unwrap();
        for c in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let win: Vec<f64> = (0..4)
                        .map(|k| x.data()[(c * 6 + oy * 2 + k / 2) * 6 + ox * 2 + k % 2])
                        .collect();
                    let o = (c * 3 + oy) * 3 + ox;
                    let m = win.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(mx.data()[o], m);
                    assert!((avg.data()[o] - win.iter().sum::<f64>() / 4.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn maxpool_ties_route_to_first_index() {
        let x = Tensor::<f64>::from_f64(vec![1, 2, 2], &[1.0, 1.0, 1.0, 1.0]).unwrap();
        let pool = PoolGeometry {
            kernel: 2,
            stride: 2,
            padding: 0,
        };
        let g = Tensor::<f64>::from_f64(vec![1, 1, 1], &[5.0]).unwrap();
        let r = maxpool2d_route(&g, &x, pool).unwrap();
        assert_eq!(r.data(), &[5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn avgpool_transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pool = PoolGeometry {
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x = random(&[2, 7, 7], &mut rng);
        let y = avgpool2d(&x, pool).unwrap();
        let g = random(y.shape(), &mut rng);
        let xt = avgpool2d_transpose(&g, x.shape(), pool).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(xt.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
