//! Naive f64 reference implementations and a central-difference gradient
//! checker. Nothing here calls into the engine's kernels.
#![allow(dead_code)]

use invdes_tensor::{Tape, Tensor, Var};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.2 * x
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `[m×k]·[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                c[i * n + j] += a[i * k + l] * b[l * n + j];
            }
        }
    }
    c
}

/// Direct nested-loop cross-correlation of `N×C×H×W` with `O×C×k×k`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(x: &[f64], w: &[f64], n: usize, c: usize, h: usize, wd: usize, o: usize, k: usize, stride: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (y * stride + ki) as isize - pad as isize;
                                let ix = (xo * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Transposed convolution by direct scatter: each input pixel adds a
/// kernel-weighted patch into the output. `w` is `Cin×Cout×k×k`.
#[allow(clippy::too_many_arguments)]
pub fn deconv2d(x: &[f64], w: &[f64], n: usize, cin: usize, h: usize, wd: usize, cout: usize, k: usize, stride: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let oh = (h - 1) * stride + k - 2 * pad;
    let ow = (wd - 1) * stride + k - 2 * pad;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for ic in 0..cin {
            for y in 0..h {
                for xi in 0..wd {
                    let v = x[((b * cin + ic) * h + y) * wd + xi];
                    for oc in 0..cout {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ty = (y * stride + ki) as isize - pad as isize;
                                let tx = (xi * stride + kj) as isize - pad as isize;
                                if ty >= 0 && tx >= 0 && (ty as usize) < oh && (tx as usize) < ow {
                                    out[((b * cout + oc) * oh + ty as usize) * ow + tx as usize] +=
                                        v * w[((ic * cout + oc) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

/// Training-mode batch norm over `N×C×inner`.
pub fn batch_norm(x: &[f64], gamma: &[f64], beta: &[f64], n: usize, c: usize, inner: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let idx = |b: usize, i: usize| (b * c + ch) * inner + i;
        let cnt = (n * inner) as f64;
        let mut mean = 0.0;
        for b in 0..n {
            for i in 0..inner {
                mean += x[idx(b, i)];
            }
        }
        mean /= cnt;
        let mut var = 0.0;
        for b in 0..n {
            for i in 0..inner {
                var += (x[idx(b, i)] - mean).powi(2);
            }
        }
        var /= cnt;
        for b in 0..n {
            for i in 0..inner {
                out[idx(b, i)] = gamma[ch] * (x[idx(b, i)] - mean) / (var + eps).sqrt() + beta[ch];
            }
        }
    }
    out
}

/// Central-difference gradient of `f` w.r.t. every input.
pub fn numeric_grads(f: &dyn Fn(&[Vec<f64>]) -> f64, inputs: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let orig = work[i][j];
            work[i][j] = orig + h;
            let plus = f(&work);
            work[i][j] = orig - h;
            let minus = f(&work);
            work[i][j] = orig;
            g[j] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// ‖a − b‖ / max(‖b‖, tiny)
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Records `inputs` as tracked leaves, builds the op with `build`, reduces
/// with the fixed projection `proj`, and returns the analytic gradients.
pub fn analytic_grads(
    inputs: &[(Vec<usize>, Vec<f64>)],
    proj: &[f64],
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(s, d)| tape.input(&Tensor::new(s, to_f32(d)).unwrap().with_grad()).unwrap())
        .collect();
    let out = build(&mut tape, &vars);
    let shape = tape.shape(out).to_vec();
    let p = tape.constant(&shape, to_f32(proj)).unwrap();
    let weighted = tape.mul(out, p).unwrap();
    let loss = tape.sum(weighted).unwrap();
    let grads = tape.backward(loss).unwrap();
    vars.iter()
        .map(|&v| grads.wrt(v).unwrap().iter().map(|&g| g as f64).collect())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
