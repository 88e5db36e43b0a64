//! Independent oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soundsieve::autograd::{Padding, Scalar, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Relative error with a floor on the magnitude so that entries whose true
/// gradient is (numerically) zero are judged on absolute error.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// A differentiable computation over a list of inputs ending in a scalar.
pub trait GradCase {
    fn inputs(&self) -> Vec<Tensor<f64>>;
    fn loss<T: Scalar>(&self, tape: &mut Tape<'_, T>, vars: &[Var]) -> Var;
}

fn eval_loss<C: GradCase>(case: &C, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let l = case.loss(&mut tape, &vars);
    tape.value(l).data()[0]
}

/// Central finite differences (h = 1e-5) in f64 of the loss with respect to
/// every input element.
pub fn numeric_grads<C: GradCase>(case: &C) -> Vec<Vec<f64>> {
    let h = 1e-5;
    let base = case.inputs();
    let mut out = Vec::new();
    for i in 0..base.len() {
        let mut g = Vec::with_capacity(base[i].len());
        for j in 0..base[i].len() {
            let mut plus = base.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = base.clone();
            minus[i].data_mut()[j] -= h;
            g.push((eval_loss(case, &plus) - eval_loss(case, &minus)) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// Reverse-mode gradients at precision `T`, widened to f64.
pub fn analytic_grads<T: Scalar, C: GradCase>(case: &C) -> Vec<Vec<f64>> {
    let inputs = case.inputs();
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.cast::<T>(), true)).collect();
    let l = case.loss(&mut tape, &vars);
    let grads = tape.backward(l).unwrap();
    vars.iter()
        .zip(&inputs)
        .map(|(v, t)| match grads.get(*v) {
            Some(g) => g.data().iter().map(|x| x.to_f64_lossy()).collect(),
            None => vec![0.0; t.len()],
        })
        .collect()
}

/// Largest relative error between analytic gradients at precision `T` and
/// f64 central differences.
pub fn max_grad_error<T: Scalar, C: GradCase>(case: &C) -> f64 {
    let num = numeric_grads(case);
    let ana = analytic_grads::<T, C>(case);
    num.iter()
        .flatten()
        .zip(ana.iter().flatten())
        .map(|(&n, &a)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Same-padding for one axis: output `ceil(len / s)`, deficit split with the
/// smaller half first.
pub fn same_pad(len: usize, k: usize, s: usize) -> (usize, usize) {
    let out = len.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(len);
    (out, total / 2)
}

pub struct NaiveConv {
    pub out_h: usize,
    pub out_w: usize,
    pub pad: (usize, usize),
}

pub fn naive_geometry(h: usize, w: usize, k: (usize, usize), s: (usize, usize), p: Padding) -> NaiveConv {
    match p {
        Padding::Same => {
            let (oh, pt) = same_pad(h, k.0, s.0);
            let (ow, pl) = same_pad(w, k.1, s.1);
            NaiveConv { out_h: oh, out_w: ow, pad: (pt, pl) }
        }
        Padding::Valid => NaiveConv {
            out_h: (h - k.0) / s.0 + 1,
            out_w: (w - k.1) / s.1 + 1,
            pad: (0, 0),
        },
    }
}

/// Direct six-loop cross-correlation. Shapes: x `[B,C,H,W]`, w `[O,C,kh,kw]`.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: &[f64],
    s: (usize, usize),
    p: Padding,
) -> Tensor<f64> {
    let [b, c, h, wd] = x.shape().try_into().unwrap();
    let [o, _, kh, kw] = w.shape().try_into().unwrap();
    let g = naive_geometry(h, wd, (kh, kw), s, p);
    let mut y = Tensor::zeros(&[b, o, g.out_h, g.out_w]);
    for bi in 0..b {
        for oi in 0..o {
            for i in 0..g.out_h {
                for j in 0..g.out_w {
                    let mut acc = bias[oi];
                    for ci in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let yy = (i * s.0 + u) as isize - g.pad.0 as isize;
                                let xx = (j * s.1 + v) as isize - g.pad.1 as isize;
                                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd {
                                    acc += x.data()[((bi * c + ci) * h + yy as usize) * wd + xx as usize]
                                        * w.data()[((oi * c + ci) * kh + u) * kw + v];
                                }
                            }
                        }
                    }
                    y.data_mut()[((bi * o + oi) * g.out_h + i) * g.out_w + j] = acc;
                }
            }
        }
    }
    y
}

/// Direct-loop gradients of `<conv2d(x, w) + bias, dy>` w.r.t. x, w and bias.
pub fn naive_conv2d_backward(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    dy: &Tensor<f64>,
    s: (usize, usize),
    p: Padding,
) -> (Tensor<f64>, Tensor<f64>, Vec<f64>) {
    let [b, c, h, wd] = x.shape().try_into().unwrap();
    let [o, _, kh, kw] = w.shape().try_into().unwrap();
    let g = naive_geometry(h, wd, (kh, kw), s, p);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = vec![0.0; o];
    for bi in 0..b {
        for oi in 0..o {
            for i in 0..g.out_h {
                for j in 0..g.out_w {
                    let gy = dy.data()[((bi * o + oi) * g.out_h + i) * g.out_w + j];
                    db[oi] += gy;
                    for ci in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let yy = (i * s.0 + u) as isize - g.pad.0 as isize;
                                let xx = (j * s.1 + v) as isize - g.pad.1 as isize;
                                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd {
                                    let xi = ((bi * c + ci) * h + yy as usize) * wd + xx as usize;
                                    let wi = ((oi * c + ci) * kh + u) * kw + v;
                                    dx.data_mut()[xi] += gy * w.data()[wi];
                                    dw.data_mut()[wi] += gy * x.data()[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// O(n²) pair count: P(anomaly score > normal score) + 0.5 P(tie), percent.
pub fn brute_force_auc(normal: &[f64], anomaly: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in anomaly {
        for &n in normal {
            if a > n {
                wins += 1.0;
            } else if a == n {
                wins += 0.5;
            }
        }
    }
    100.0 * wins / (normal.len() * anomaly.len()) as f64
}

/// Explicit ROC: one threshold per distinct score (descending), TPR/FPR by
/// direct counting, trapezoids up to FPR = p with linear interpolation at the
/// boundary, then the standardized partial-area transform. Percent.
pub fn brute_force_pauc(normal: &[f64], anomaly: &[f64], p: f64) -> f64 {
    let mut thresholds: Vec<f64> = normal.iter().chain(anomaly).copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let fpr = normal.iter().filter(|&&s| s >= t).count() as f64 / normal.len() as f64;
        let tpr = anomaly.iter().filter(|&&s| s >= t).count() as f64 / anomaly.len() as f64;
        pts.push((fpr, tpr));
    }
    let mut area = 0.0;
    for win in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (win[0], win[1]);
        if x0 >= p {
            break;
        }
        if x1 <= p {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_at = y0 + (y1 - y0) * (p - x0) / (x1 - x0);
            area += (p - x0) * (y0 + y_at) / 2.0;
        }
    }
    let min_area = p * p / 2.0;
    100.0 * 0.5 * (1.0 + (area - min_area) / (p - min_area))
}

pub fn random_scores(rng: &mut ChaCha8Rng, n: usize, ties: bool) -> (Vec<f64>, Vec<f64>) {
    let mut draw = |shift: f64| {
        let v: f64 = rng.gen_range(0.0..1.0) + shift;
        if ties {
            (v * 8.0).round() / 8.0
        } else {
            v
        }
    };
    let n_anom = n / 2;
    let normal: Vec<f64> = (0..n - n_anom).map(|_| draw(0.0)).collect();
    let anomaly: Vec<f64> = (0..n_anom).map(|_| draw(0.3)).collect();
    (normal, anomaly)
}

/// Counts frames by sliding a window until it falls off the end.
pub fn enumerate_frames(len: usize, frame: usize, hop: usize) -> usize {
    let mut count = 0;
    let mut start = 0;
    while start + frame <= len {
        count += 1;
        start += hop;
    }
    count
}

/// Brute-force count of dense vectors: every buffer, every frame in it,
/// every context window that fits.
pub fn enumerate_dense_rows(len: usize) -> usize {
    let mut rows = 0;
    let mut b = 0;
    while b + 16_000 <= len {
        let frames = enumerate_frames(16_000, 1024, 512);
        let mut s = 0;
        while s + 5 <= frames {
            rows += 1;
            s += 1;
        }
        b += 8000;
    }
    rows
}

/// Forward and all gradients of the im2col convolution at f32 against the
/// six-loop definition at f64; returns the largest absolute deviation.
pub fn conv_deviation(
    r: &mut ChaCha8Rng,
    shape: [usize; 4],
    filters: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> f64 {
    let x = random_tensor(r, &shape);
    let w = random_tensor(r, &[filters, shape[1], kernel.0, kernel.1]);
    let b = random_tensor(r, &[filters]);
    let expected = naive_conv2d(&x, &w, b.data(), stride, padding);
    let dy = random_tensor(r, expected.shape());
    let (edx, edw, edb) = naive_conv2d_backward(&x, &w, &dy, stride, padding);

    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(x.cast(), true);
    let wv = tape.leaf(w.cast(), true);
    let bv = tape.leaf(b.cast(), true);
    let y = tape.conv2d(xv, wv, Some(bv), stride, padding).unwrap();
    assert_eq!(tape.value(y).shape(), expected.shape());
    // mse against y - dy*n/2 has gradient exactly dy with respect to y
    let target: Tensor<f32> = Tensor::new(
        expected.shape().to_vec(),
        tape.value(y)
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| v - (g * expected.len() as f64 / 2.0) as f32)
            .collect(),
    )
    .unwrap();
    let t = tape.leaf(target, false);
    let l = tape.mse(y, t).unwrap();
    let grads = tape.backward(l).unwrap();

    let widen = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    [
        max_abs_diff(&widen(tape.value(y)), expected.data()),
        max_abs_diff(&widen(grads.get(xv).unwrap()), edx.data()),
        max_abs_diff(&widen(grads.get(wv).unwrap()), edw.data()),
        max_abs_diff(&widen(grads.get(bv).unwrap()), &edb),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Random small instances of every layer kind, each ending in an MSE loss
/// against a fixed random target.
pub mod cases {
    use super::*;
    use soundsieve::autograd::BnMode;

    pub struct DenseCase {
        pub x: Tensor<f64>,
        pub w: Tensor<f64>,
        pub b: Tensor<f64>,
        pub target: Tensor<f64>,
    }

    impl DenseCase {
        pub fn random(rng: &mut ChaCha8Rng, batch: usize, n_in: usize, n_out: usize) -> Self {
            Self {
                x: random_tensor(rng, &[batch, n_in]),
                w: random_tensor(rng, &[n_in, n_out]),
                b: random_tensor(rng, &[n_out]),
                target: random_tensor(rng, &[batch, n_out]),
            }
        }
    }

    impl GradCase for DenseCase {
        fn inputs(&self) -> Vec<Tensor<f64>> {
            vec![self.x.clone(), self.w.clone(), self.b.clone()]
        }
        fn loss<T: Scalar>(&self, tape: &mut Tape<'_, T>, v: &[Var]) -> Var {
            let y = tape.dense(v[0], v[1], Some(v[2])).unwrap();
            let t = tape.leaf(self.target.cast(), false);
            tape.mse(y, t).unwrap()
        }
    }

    pub struct ConvCase {
        pub x: Tensor<f64>,
        pub w: Tensor<f64>,
        pub b: Tensor<f64>,
        pub stride: (usize, usize),
        pub padding: Padding,
        pub target: Tensor<f64>,
    }

    impl ConvCase {
        pub fn random(
            rng: &mut ChaCha8Rng,
            x_shape: [usize; 4],
            filters: usize,
            kernel: (usize, usize),
            stride: (usize, usize),
            padding: Padding,
        ) -> Self {
            let g = naive_geometry(x_shape[2], x_shape[3], kernel, stride, padding);
            Self {
                x: random_tensor(rng, &x_shape),
                w: random_tensor(rng, &[filters, x_shape[1], kernel.0, kernel.1]),
                b: random_tensor(rng, &[filters]),
                stride,
                padding,
                target: random_tensor(rng, &[x_shape[0], filters, g.out_h, g.out_w]),
            }
        }
    }

    impl GradCase for ConvCase {
        fn inputs(&self) -> Vec<Tensor<f64>> {
            vec![self.x.clone(), self.w.clone(), self.b.clone()]
        }
        fn loss<T: Scalar>(&self, tape: &mut Tape<'_, T>, v: &[Var]) -> Var {
            let y = tape.conv2d(v[0], v[1], Some(v[2]), self.stride, self.padding).unwrap();
            let t = tape.leaf(self.target.cast(), false);
            tape.mse(y, t).unwrap()
        }
    }

    /// Transposed convolution from `[B, Ci, h, w]` up to `[B, Co, H, W]`.
    pub struct ConvTransposeCase {
        pub x: Tensor<f64>,
        pub w: Tensor<f64>,
        pub b: Tensor<f64>,
        pub stride: (usize, usize),
        pub target_chw: [usize; 3],
        pub target: Tensor<f64>,
    }

    impl ConvTransposeCase {
        pub fn random(
            rng: &mut ChaCha8Rng,
            batch: usize,
            in_channels: usize,
            target_chw: [usize; 3],
            kernel: (usize, usize),
            stride: (usize, usize),
        ) -> Self {
            let (h, _) = same_pad(target_chw[1], kernel.0, stride.0);
            let (w, _) = same_pad(target_chw[2], kernel.1, stride.1);
            Self {
                x: random_tensor(rng, &[batch, in_channels, h, w]),
                w: random_tensor(rng, &[in_channels, target_chw[0], kernel.0, kernel.1]),
                b: random_tensor(rng, &[target_chw[0]]),
                stride,
                target_chw,
                target: random_tensor(rng, &[batch, target_chw[0], target_chw[1], target_chw[2]]),
            }
        }
    }

    impl GradCase for ConvTransposeCase {
        fn inputs(&self) -> Vec<Tensor<f64>> {
            vec![self.x.clone(), self.w.clone(), self.b.clone()]
        }
        fn loss<T: Scalar>(&self, tape: &mut Tape<'_, T>, v: &[Var]) -> Var {
            let y = tape
                .conv_transpose2d(v[0], v[1], Some(v[2]), self.stride, self.target_chw)
                .unwrap();
            let t = tape.leaf(self.target.cast(), false);
            tape.mse(y, t).unwrap()
        }
    }

    pub struct BatchNormCase {
        pub x: Tensor<f64>,
        pub gamma: Tensor<f64>,
        pub beta: Tensor<f64>,
        pub target: Tensor<f64>,
        pub running: Option<(Vec<f64>, Vec<f64>)>,
    }

    impl BatchNormCase {
        pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], infer: bool) -> Self {
            let c = shape[1];
            let running = infer.then(|| {
                (
                    (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                    (0..c).map(|_| rng.gen_range(0.2..2.0)).collect(),
                )
            });
            Self {
                x: random_tensor(rng, shape),
                gamma: Tensor::from_fn(&[c], |_| rng.gen_range(0.5..1.5)),
                beta: random_tensor(rng, &[c]),
                target: random_tensor(rng, shape),
                running,
            }
        }
    }

    impl GradCase for BatchNormCase {
        fn inputs(&self) -> Vec<Tensor<f64>> {
            vec![self.x.clone(), self.gamma.clone(), self.beta.clone()]
        }
        fn loss<T: Scalar>(&self, tape: &mut Tape<'_, T>, v: &[Var]) -> Var {
            let cast = |xs: &[f64]| -> Vec<T> { xs.iter().map(|&x| T::from_f64_lossy(x)).collect() };
            let running = self.running.as_ref().map(|(m, s)| (cast(m), cast(s)));
            let mode = match &running {
                None => BnMode::Train,
                Some((m, s)) => BnMode::Infer {
                    running_mean: m,
                    running_var: s,
                },
            };
            let (y, _) = tape.batch_norm(v[0], v[1], v[2], mode).unwrap();
            let t = tape.leaf(self.target.cast(), false);
            tape.mse(y, t).unwrap()
        }
    }

    /// dense → relu → dense, keeping pre-activations away from the kink.
    pub struct ReluCase {
        pub inner: DenseCase,
        pub w2: Tensor<f64>,
        pub target: Tensor<f64>,
    }

    impl ReluCase {
        pub fn random(rng: &mut ChaCha8Rng, batch: usize, n_in: usize, hidden: usize) -> Self {
            let mut inner = DenseCase::random(rng, batch, n_in, hidden);
            // push every pre-activation at least 0.05 away from zero
            let pre = {
                let mut tape = Tape::<f64>::new();
                let x = tape.leaf(inner.x.clone(), false);
                let w = tape.leaf(inner.w.clone(), false);
                let y = tape.dense(x, w, None).unwrap();
                tape.value(y).clone()
            };
            for j in 0..hidden {
                let col: Vec<f64> = (0..batch).map(|b| pre.data()[b * hidden + j]).collect();
                let mut best = 0.0;
                let mut best_gap = -1.0;
                for cand in [-0.9, -0.5, -0.2, 0.0, 0.2, 0.5, 0.9] {
                    let gap = col.iter().map(|v: &f64| (v + cand).abs()).fold(f64::MAX, f64::min);
                    if gap > best_gap {
                        best_gap = gap;
                        best = cand;
                    }
                }
                inner.b.data_mut()[j] = best;
            }
            Self {
                w2: random_tensor(rng, &[hidden, 2]),
                target: random_tensor(rng, &[batch, 2]),
                inner,
            }
        }
    }

    impl GradCase for ReluCase {
        fn inputs(&self) -> Vec<Tensor<f64>> {
            vec![self.inner.x.clone(), self.inner.w.clone(), self.inner.b.clone(), self.w2.clone()]
        }
        fn loss<T: Scalar>(&self, tape: &mut Tape<'_, T>, v: &[Var]) -> Var {
            let h = tape.dense(v[0], v[1], Some(v[2])).unwrap();
            let a = tape.relu(h);
            let y = tape.dense(a, v[3], None).unwrap();
            let t = tape.leaf(self.target.cast(), false);
            tape.mse(y, t).unwrap()
        }
    }

    pub struct MseCase {
        pub pred: Tensor<f64>,
        pub target: Tensor<f64>,
    }

    impl GradCase for MseCase {
        fn inputs(&self) -> Vec<Tensor<f64>> {
            vec![self.pred.clone(), self.target.clone()]
        }
        fn loss<T: Scalar>(&self, tape: &mut Tape<'_, T>, v: &[Var]) -> Var {
            tape.mse(v[0], v[1]).unwrap()
        }
    }

    /// Every layer kind at instance index `i`; shapes vary with `i`.
    pub fn instance_errors<T: Scalar>(seed: u64, i: usize) -> Vec<(&'static str, f64)> {
        let mut r = rng(seed.wrapping_mul(1000) + i as u64);
        let strides = [(1, 1), (1, 2), (2, 1), (2, 2)];
        let s = strides[i % 4];
        let kernel = [(1, 1), (3, 3), (2, 3), (5, 5)][i % 4];
        let b = 2 + i % 2;
        vec![
            ("dense", max_grad_error::<T, _>(&DenseCase::random(&mut r, b, 2 + i % 4, 1 + i % 3))),
            (
                "conv2d",
                max_grad_error::<T, _>(&ConvCase::random(
                    &mut r,
                    [b, 1 + i % 3, 3 + i % 4, 4 + i % 3],
                    1 + i % 2,
                    kernel,
                    s,
                    if i % 5 == 4 { Padding::Valid } else { Padding::Same },
                )),
            ),
            (
                "conv_transpose2d",
                max_grad_error::<T, _>(&ConvTransposeCase::random(
                    &mut r,
                    b,
                    1 + i % 3,
                    [1 + i % 2, 3 + i % 4, 4 + i % 3],
                    kernel,
                    s,
                )),
            ),
            (
                "batch_norm",
                max_grad_error::<T, _>(&BatchNormCase::random(&mut r, &[b + 1, 2 + i % 2, 1 + i % 3], false)),
            ),
            (
                "batch_norm_infer",
                max_grad_error::<T, _>(&BatchNormCase::random(&mut r, &[b, 3], true)),
            ),
            ("relu", max_grad_error::<T, _>(&ReluCase::random(&mut r, b, 3, 4))),
            (
                "mse",
                max_grad_error::<T, _>(&MseCase {
                    pred: random_tensor(&mut r, &[b, 3]),
                    target: random_tensor(&mut r, &[b, 3]),
                }),
            ),
        ]
    }
}
