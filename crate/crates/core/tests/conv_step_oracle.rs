//! One full-config convolution step checked against a plain-loop
//! transcription on a 2-channel, 2×2-kernel fixture.

use agf_core::agf::conv_layer_step;
use agf_core::model::Conv2d;
use agf_core::{AgfConfig, Layer, Tensor};

const C: usize = 2;
const H: usize = 3;
const K: usize = 2;
const O: usize = H - K + 1;
const EPS: f64 = 1e-9;

type Img = [[[f64; H]; H]; C];
type Out = [[[f64; O]; O]; C];
type Kern = [[[[f64; K]; K]; C]; C];

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Splits `r` over inputs proportionally to `xs·ws`. What the stabilizer
/// holds back on a live output is split again exactly; dead outputs
/// (`z = 0`) come back untouched.
fn split(xs: &Img, ws: &Kern, r: &Out) -> (Img, Out) {
    let mut rel = [[[0.0; H]; H]; C];
    let mut dead = [[[0.0; O]; O]; C];
    for o in 0..C {
        for i in 0..O {
            for j in 0..O {
                let mut z = 0.0;
                for c in 0..C {
                    for a in 0..K {
                        for b in 0..K {
                            z += xs[c][i + a][j + b] * ws[o][c][a][b];
                        }
                    }
                }
                if z == 0.0 {
                    dead[o][i][j] = r[o][i][j];
                    continue;
                }
                let s = r[o][i][j] / (z + EPS * z.signum());
                let held = r[o][i][j] - z * s;
                for c in 0..C {
                    for a in 0..K {
                        for b in 0..K {
                            let share = xs[c][i + a][j + b] * ws[o][c][a][b];
                            rel[c][i + a][j + b] += share * s + share * held / z;
                        }
                    }
                }
            }
        }
    }
    (rel, dead)
}

fn add(a: &mut Img, b: &Img) {
    for c in 0..C {
        for i in 0..H {
            for j in 0..H {
                a[c][i][j] += b[c][i][j];
            }
        }
    }
}

/// Absolute-value rule, with dead outputs split by weights alone and then
/// uniformly.
fn rule(x: &Img, w: &Kern, r: &Out, agnostic: bool) -> Img {
    let abs_w = w.map(|o| o.map(|c| c.map(|row| row.map(f64::abs))));
    let ones_x = [[[1.0; H]; H]; C];
    let ones_w = [[[[1.0; K]; K]; C]; C];
    let xs = if agnostic {
        ones_x
    } else {
        x.map(|c| c.map(|row| row.map(f64::abs)))
    };
    let (mut out, mut rest) = split(&xs, &abs_w, r);
    for ws in [&abs_w, &ones_w] {
        let (extra, dead) = split(&ones_x, ws, &rest);
        add(&mut out, &extra);
        rest = dead;
    }
    out
}

/// Signed factorization map of `y`, partitioned by the channel mean of `guide`.
fn factor(y: &Img, guide: &Img) -> [[f64; H]; H] {
    let max = y.iter().flatten().flatten().cloned().fold(f64::MIN, f64::max);
    let mut hm = [[[0.0; H]; H]; C];
    for c in 0..C {
        for i in 0..H {
            for j in 0..H {
                hm[c][i][j] = sigmoid(if max > 0.0 { y[c][i][j] / max } else { 0.0 });
            }
        }
    }
    let (mut fg, mut bg, mut nf, mut nb) = ([0.0; C], [0.0; C], 0.0, 0.0);
    for i in 0..H {
        for j in 0..H {
            let phi: f64 = (0..C).map(|c| guide[c][i][j]).sum::<f64>() / C as f64;
            if phi > 0.0 {
                nf += 1.0;
                (0..C).for_each(|c| fg[c] += hm[c][i][j]);
            } else {
                nb += 1.0;
                (0..C).for_each(|c| bg[c] += hm[c][i][j]);
            }
        }
    }
    for c in 0..C {
        if nf > 0.0 {
            fg[c] /= nf;
        }
        if nb > 0.0 {
            bg[c] /= nb;
        }
    }
    // 2×2 normal equations with a small ridge
    let (mut gbb, mut gbf, mut gff) = (0.0, 0.0, 0.0);
    for c in 0..C {
        gbb += bg[c] * bg[c];
        gbf += bg[c] * fg[c];
        gff += fg[c] * fg[c];
    }
    let lam = 1e-6 * (gbb + gff) / 2.0;
    let (a, b, d) = (gbb + lam, gbf, gff + lam);
    let det = a * d - b * b;
    let mut out = [[0.0; H]; H];
    for i in 0..H {
        for j in 0..H {
            let rb: f64 = (0..C).map(|c| bg[c] * hm[c][i][j]).sum();
            let rf: f64 = (0..C).map(|c| fg[c] * hm[c][i][j]).sum();
            let wb = ((d * rb - b * rf) / det).max(0.0);
            let wf = ((-b * rb + a * rf) / det).max(0.0);
            out[i][j] = wf - wb;
        }
    }
    out
}

fn reference_step(x: &Img, g: &Img, w: &Kern, phi_prev: &Out) -> Img {
    let c_rel = rule(x, w, phi_prev, false);
    let a_rel = rule(x, w, phi_prev, true);
    let f_grad = factor(g, &c_rel);
    let f_x = factor(x, &c_rel);

    let mut m = [[0.0; H]; H];
    for i in 0..H {
        for j in 0..H {
            m[i][j] = ((0..C).map(|c| x[c][i][j] * g[c][i][j]).sum::<f64>() / C as f64).max(0.0);
        }
    }
    let m_max = m.iter().flatten().cloned().fold(0.0, f64::max);
    if m_max > 0.0 {
        m.iter_mut().flatten().for_each(|v| *v /= m_max);
    }

    let mut r = [[[0.0; H]; H]; C];
    let (mut r_sum, mut support) = (0.0, 0usize);
    for c in 0..C {
        for i in 0..H {
            for j in 0..H {
                let gate = sigmoid(c_rel[c][i][j]);
                r[c][i][j] = a_rel[c][i][j] + f_grad[i][j].max(0.0) + (f_x[i][j].max(0.0) + m[i][j]) * gate;
                r_sum += r[c][i][j];
                if c_rel[c][i][j] != 0.0 {
                    support += 1;
                }
            }
        }
    }
    let shift = r_sum / support as f64;
    let mut out = [[[0.0; H]; H]; C];
    for c in 0..C {
        for i in 0..H {
            for j in 0..H {
                let v = c_rel[c][i][j] + r[c][i][j];
                out[c][i][j] = if c_rel[c][i][j] != 0.0 { v - shift } else { v };
            }
        }
    }
    out
}

fn flat<const N: usize, const M: usize>(a: &[[[f64; N]; N]; M]) -> Vec<f64> {
    a.iter().flatten().flatten().cloned().collect()
}

#[test]
fn full_conv_step_matches_loop_transcription() {
    check([
        [[0.9, -0.4, 0.2], [0.0, 1.3, -0.7], [0.5, 0.1, -1.1]],
        [[-0.3, 0.8, 0.6], [1.0, -0.2, 0.4], [0.0, 0.7, 0.3]],
    ]);
}

#[test]
fn dead_receptive_field_matches_loop_transcription() {
    // the top-left output sees only zeros
    check([
        [[0.0, 0.0, 0.2], [0.0, 0.0, -0.7], [0.5, 0.1, -1.1]],
        [[0.0, 0.0, 0.6], [0.0, 0.0, 0.4], [0.0, 0.7, 0.3]],
    ]);
}

fn check(x: Img) {
    let g: Img = [
        [[0.2, -0.5, 0.1], [0.7, 0.3, -0.2], [-0.4, 0.6, 0.05]],
        [[0.3, 0.1, -0.6], [0.2, 0.9, 0.4], [-0.1, -0.3, 0.8]],
    ];
    let w: Kern = [
        [[[0.5, -0.2], [0.3, 0.8]], [[-0.6, 0.1], [0.4, -0.3]]],
        [[[0.2, 0.7], [-0.5, 0.1]], [[0.9, -0.4], [0.0, 0.6]]],
    ];
    let phi_prev: Out = [[[1.2, -0.4], [0.3, 0.8]], [[-0.6, 0.5], [0.9, 0.1]]];

    let want = reference_step(&x, &g, &w, &phi_prev);

    let layer = Layer::Conv2d(Conv2d {
        weight: Tensor::<f64>::from_f64(vec![C, C, K, K], &w.iter().flat_map(flat).collect::<Vec<_>>()).unwrap(),
        bias: Tensor::zeros(vec![C]),
        stride: 1,
        padding: 0,
    });
    let xt = Tensor::from_f64(vec![C, H, H], &flat(&x)).unwrap();
    let gt = Tensor::from_f64(vec![C, H, H], &flat(&g)).unwrap();
    let pt = Tensor::from_f64(vec![C, O, O], &flat(&phi_prev)).unwrap();
    let got = conv_layer_step(&layer, &xt, &gt, &pt, &AgfConfig::full()).unwrap();

    assert_eq!(got.shape(), &[C, H, H]);
    for (a, b) in got.data().iter().zip(flat(&want)) {
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }
    // the step conserves the incoming total
    let total: f64 = flat(&phi_prev).iter().sum();
    assert!((got.sum() - total).abs() <= 1e-9);
}
