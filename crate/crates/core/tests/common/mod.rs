//! Independent f64 reference networks and losses, written with plain loops,
//! used as gradient and value oracles.
#![allow(dead_code)]

use std::cell::RefCell;
use std::path::PathBuf;

use advforge::models::{Architecture, Classifier, Discriminator};
use advforge::Tensor;

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Square-kernel cross-correlation with stride 1.
#[allow(clippy::too_many_arguments)]
pub fn conv(x: &[f64], n: usize, c: usize, h: usize, w: usize, wt: &[f64], b: &[f64], oc: usize, k: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    conv_strided(x, [n, c, h, w], wt, b, oc, k, pad, 1)
}

#[allow(clippy::too_many_arguments)]
pub fn conv_strided(x: &[f64], [n, c, h, w]: [usize; 4], wt: &[f64], b: &[f64], oc: usize, k: usize, pad: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * oc * oh * ow];
    for s in 0..n {
        for o in 0..oc {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((s * c + ci) * h + iy as usize) * w + ix as usize]
                                    * wt[((o * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((s * oc + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

thread_local! {
    static PATTERN: RefCell<Option<Vec<u8>>> = const { RefCell::new(None) };
}

fn note(bits: impl Iterator<Item = u8>) {
    PATTERN.with(|p| {
        if let Some(p) = p.borrow_mut().as_mut() {
            p.extend(bits);
        }
    });
}

/// Runs `f` and returns the relu signs and pool winners it went through.
pub fn with_pattern<T>(f: impl FnOnce() -> T) -> (T, Vec<u8>) {
    PATTERN.with(|p| *p.borrow_mut() = Some(Vec::new()));
    let out = f();
    let pattern = PATTERN.with(|p| p.borrow_mut().take()).unwrap_or_default();
    (out, pattern)
}

pub fn relu(v: &mut [f64]) {
    note(v.iter().map(|&x| (x > 0.0) as u8));
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

pub fn pool2(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                let at = |k: usize| x[(p * h + 2 * y + k / 2) * w + 2 * xx + k % 2];
                let best = (1..4).fold(0, |b, k| if at(k) > at(b) { k } else { b });
                note(std::iter::once(best as u8));
                out[(p * oh + y) * ow + xx] = at(best);
            }
        }
    }
    (out, oh, ow)
}

/// `x: [n, inp]`, `w: [inp, out]`.
pub fn linear(x: &[f64], n: usize, inp: usize, out: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n * out];
    for s in 0..n {
        for o in 0..out {
            let mut acc = b[o];
            for i in 0..inp {
                acc += x[s * inp + i] * w[i * out + o];
            }
            y[s * out + o] = acc;
        }
    }
    y
}

/// Mean negative log-softmax of the labelled entries.
pub fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    for (row, &l) in logits.chunks(classes).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    total / labels.len() as f64
}

/// A classifier re-expressed in f64 from its configuration and parameters.
#[derive(Clone)]
pub struct RefClassifier {
    pub arch: Architecture,
    pub input: [usize; 3],
    pub classes: usize,
    pub channels: Vec<usize>,
    pub params: Vec<Vec<f64>>,
}

impl RefClassifier {
    pub fn of(m: &Classifier) -> Self {
        let cfg = m.config();
        Self {
            arch: cfg.arch,
            input: cfg.input_shape,
            classes: cfg.classes,
            channels: cfg.channels.clone(),
            params: m.params().iter().map(|t| to_f64(t)).collect(),
        }
    }

    /// Extractor output, `[n, D]` flattened; also returns `D`.
    pub fn features_with(&self, p: &[Vec<f64>], x: &[f64], n: usize) -> (Vec<f64>, usize) {
        let [c, h, w] = self.input;
        match self.arch {
            Architecture::Lenet => {
                // conv5 pad2, relu, pool2, conv5, relu, pool2, fc 120, relu, fc 84, relu
                let (c1, c2) = (self.channels[0], self.channels[1]);
                let (mut a, h1, w1) = conv(x, n, c, h, w, &p[0], &p[1], c1, 5, 2);
                relu(&mut a);
                let (a, h2, w2) = pool2(&a, n * c1, h1, w1);
                let (mut a, h3, w3) = conv(&a, n, c1, h2, w2, &p[2], &p[3], c2, 5, 0);
                relu(&mut a);
                let (a, h4, w4) = pool2(&a, n * c2, h3, w3);
                let flat = c2 * h4 * w4;
                let mut a = linear(&a, n, flat, 120, &p[4], &p[5]);
                relu(&mut a);
                let mut a = linear(&a, n, 120, 84, &p[6], &p[7]);
                relu(&mut a);
                (a, 84)
            }
            Architecture::SmallCnn => {
                // three times: conv3 pad1, relu, pool2
                let (mut a, mut cc, mut hh, mut ww) = (x.to_vec(), c, h, w);
                for (i, &oc) in self.channels.iter().enumerate() {
                    let (mut y, oh, ow) = conv(&a, n, cc, hh, ww, &p[2 * i], &p[2 * i + 1], oc, 3, 1);
                    relu(&mut y);
                    let (y, ph, pw) = pool2(&y, n * oc, oh, ow);
                    (a, cc, hh, ww) = (y, oc, ph, pw);
                }
                (a, cc * hh * ww)
            }
        }
    }

    pub fn head_with(&self, p: &[Vec<f64>], z: &[f64], n: usize, d: usize) -> Vec<f64> {
        let k = p.len();
        linear(z, n, d, self.classes, &p[k - 2], &p[k - 1])
    }

    pub fn logits_with(&self, p: &[Vec<f64>], x: &[f64], n: usize) -> Vec<f64> {
        let (z, d) = self.features_with(p, x, n);
        self.head_with(p, &z, n, d)
    }

    pub fn logits(&self, x: &[f64], n: usize) -> Vec<f64> {
        self.logits_with(&self.params, x, n)
    }
}

/// The discriminator in f64: three relu layers, then domain and class heads.
#[derive(Clone)]
pub struct RefDiscriminator {
    pub width: usize,
    pub classes: usize,
    pub params: Vec<Vec<f64>>,
}

impl RefDiscriminator {
    pub fn of(d: &Discriminator) -> Self {
        Self {
            width: d.width(),
            classes: d.config().classes,
            params: d.params().iter().map(|t| to_f64(t)).collect(),
        }
    }

    pub fn trunk_with(&self, p: &[Vec<f64>], z: &[f64], n: usize) -> Vec<f64> {
        let mut a = z.to_vec();
        for i in 0..3 {
            a = linear(&a, n, self.width, self.width, &p[2 * i], &p[2 * i + 1]);
            relu(&mut a);
        }
        a
    }

    pub fn domain_with(&self, p: &[Vec<f64>], z: &[f64], n: usize) -> Vec<f64> {
        let t = self.trunk_with(p, z, n);
        linear(&t, n, self.width, 1, &p[6], &p[7])
    }

    pub fn class_with(&self, p: &[Vec<f64>], z: &[f64], n: usize) -> Vec<f64> {
        let t = self.trunk_with(p, z, n);
        linear(&t, n, self.width, self.classes, &p[8], &p[9])
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Least-squares domain loss with `one` labelled 1 and `zero` labelled 0.
pub fn lsq_domain(one: &[f64], zero: &[f64]) -> f64 {
    mean(&one.iter().map(|h| (h - 1.0) * (h - 1.0)).collect::<Vec<_>>()) + mean(&zero.iter().map(|h| h * h).collect::<Vec<_>>())
}

/// `(f(p + h e) - f(p - h e)) / 2h` on coordinate `i` of tensor `t`, or
/// `None` when the two evaluations and the centre do not share one relu
/// and pooling pattern, i.e. the stencil straddles a kink.
pub fn central_difference(p: &[Vec<f64>], t: usize, i: usize, h: f64, f: impl Fn(&[Vec<f64>]) -> f64) -> Option<f64> {
    let (_, centre) = with_pattern(|| f(p));
    let mut q = p.to_vec();
    q[t][i] += h;
    let (up, pu) = with_pattern(|| f(&q));
    q[t][i] -= 2.0 * h;
    let (down, pd) = with_pattern(|| f(&q));
    (pu == centre && pd == centre).then(|| (up - down) / (2.0 * h))
}

/// Relative error with a floor on the magnitude for near-zero gradients.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// MNIST directory: `ADVFORGE_DATA_DIR`, else `data/mnist` at the workspace root.
pub fn mnist_dir() -> PathBuf {
    match std::env::var_os("ADVFORGE_DATA_DIR") {
        Some(d) => PathBuf::from(d),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

pub fn mnist_available() -> bool {
    let d = mnist_dir();
    ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
        .iter()
        .all(|f| d.join(f).is_file())
}
