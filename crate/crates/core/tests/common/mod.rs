//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use blindspot_core::nn::{Init, Layer, Model};
use blindspot_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Directory holding the MNIST IDX files, if present.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("BLINDSPOT_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    let present = dir.join("train-labels-idx1-ubyte.gz").exists() || dir.join("train-labels-idx1-ubyte").exists();
    present.then_some(dir)
}

/// Cross-correlation by direct summation over `(c, ki, kj)` in that order.
pub fn naive_conv2d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [f, _, kh, kw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for s in 0..n {
        for o in 0..f {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xo * stride + j) as isize - pad as isize;
                                let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    0.0
                                } else {
                                    x.data()[((s * c + ch) * h + iy as usize) * w + ix as usize]
                                };
                                acc += k.data()[((o * c + ch) * kh + i) * kw + j] * v;
                            }
                        }
                    }
                    out[((s * f + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, f, oh, ow], out).unwrap()
}

pub fn naive_maxpool(x: &Tensor, win: usize, stride: usize) -> Tensor {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let oh = (h - win) / stride + 1;
    let ow = (w - win) / stride + 1;
    let mut out = Vec::new();
    for p in 0..n * c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for i in 0..win {
                    for j in 0..win {
                        m = m.max(x.data()[p * h * w + (y * stride + i) * w + xo * stride + j]);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

/// Mean of the k smallest distances after a full stable sort.
pub fn brute_knn(query: &[f64], train: &[Vec<f64>], k: usize, p: Option<f64>) -> f64 {
    let mut d: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let diffs = query.iter().zip(t).map(|(a, b)| (a - b).abs());
            let v = match p {
                None => diffs.fold(0.0, f64::max),
                Some(p) if p == 1.0 => diffs.sum(),
                Some(_) => diffs.map(|x| x * x).sum::<f64>().sqrt(),
            };
            (v, i)
        })
        .collect();
    d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    d[..k].iter().map(|x| x.0).sum::<f64>() / k as f64
}

/// Random conv2d and maxpool2d instances up to 4×4×8×8 compared exactly
/// with the naive loops. Returns `(checked, agreeing)`.
pub fn conv_pool_instances(count: usize, seed: u64) -> (usize, usize) {
    use blindspot_core::tensor::ops;
    let mut r = rng(seed);
    let (mut checked, mut agree) = (0, 0);
    for _ in 0..count {
        let n = r.gen_range(1..=4);
        let c = r.gen_range(1..=4);
        let h = r.gen_range(1..=8);
        let w = r.gen_range(1..=8);
        let f = r.gen_range(1..=4);
        let kh = r.gen_range(1..=3);
        let stride = r.gen_range(1..=2);
        let pad = r.gen_range(0..=1);
        if h + 2 * pad < kh || w + 2 * pad < kh {
            continue;
        }
        let x = random_tensor(&mut r, &[n, c, h, w], 1.0);
        let k = random_tensor(&mut r, &[f, c, kh, kh], 1.0);
        checked += 1;
        agree += (ops::conv2d(&x, &k, stride, pad).unwrap() == naive_conv2d(&x, &k, stride, pad)) as usize;
        let win = r.gen_range(1..=2);
        if h >= win && w >= win {
            checked += 1;
            agree += (ops::maxpool2d(&x, win, stride).unwrap().0 == naive_maxpool(&x, win, stride)) as usize;
        }
    }
    (checked, agree)
}

/// Random k-NN instances checked for exact equality with a full sort.
pub fn knn_instances(count: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut agree = 0;
    for _ in 0..count {
        let n = r.gen_range(1..=200);
        let d = r.gen_range(1..=6);
        // coarse values make distance ties common
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.gen_range(-3..=3) as f64 * 0.5).collect()).collect();
        let q: Vec<f64> = (0..d).map(|_| r.gen_range(-3..=3) as f64 * 0.5).collect();
        let k = r.gen_range(1..=n);
        let fm = blindspot_core::geometry::FeatureMatrix::new(n, d, rows.concat(), blindspot_core::data::Split::Train, blindspot_core::geometry::Extractor::Raw).unwrap();
        let (norm, p) = match r.gen_range(0..3) {
            0 => (blindspot_core::geometry::Norm::L1, Some(1.0)),
            1 => (blindspot_core::geometry::Norm::L2, Some(2.0)),
            _ => (blindspot_core::geometry::Norm::Linf, None),
        };
        if blindspot_core::geometry::knn_distance(&q, &fm, k, norm).unwrap() == brute_knn(&q, &rows, k, p) {
            agree += 1;
        }
    }
    agree
}

pub fn gaussian_points(n: usize, mean: [f64; 2], seed: u64) -> Vec<[f64; 2]> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut r);
            let b: f64 = StandardNormal.sample(&mut r);
            [mean[0] + a, mean[1] + b]
        })
        .collect()
}

/// Two-class linear model, a point of class 0 and its exact minimal L∞
/// distortion `margin / ‖w‖₁`.
pub fn linear_case(seed: u64, d: usize) -> (Model, Tensor, usize, f64) {
    let mut rng = rng(seed);
    let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.2..0.2)).collect();
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    let dot: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
    let margin = rng.gen_range(0.03..0.2) * l1;
    let b = margin - dot;
    let model = linear_two_class(&w, b);
    (model, Tensor::new(vec![1, 1, 1, d], x).unwrap(), 0, margin / l1)
}

/// Relative error with a small absolute floor in the denominator.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

/// Two-class linear model whose class-0 logit minus class-1 logit is `w·x + b`.
pub fn linear_two_class(w: &[f64], b: f64) -> Model {
    let d = w.len();
    let mut m = Model::new([1, 1, d], vec![Layer::Flatten, Layer::Linear { out_features: 2 }], Init::Zeros).unwrap();
    {
        let mut it = m.parameters_mut();
        let wt = it.next().unwrap();
        for (i, &v) in w.iter().enumerate() {
            wt.data_mut()[i * 2] = v;
        }
        it.next().unwrap().data_mut()[0] = b;
    }
    m
}

/// Checks that `text` is a single well-nested XML element tree.
pub fn svg_well_formed(text: &str) -> Result<(), String> {
    let mut stack: Vec<String> = Vec::new();
    let mut roots = 0;
    let mut rest = text.trim();
    while let Some(start) = rest.find('<') {
        if !rest[..start].trim().is_empty() && stack.is_empty() {
            return Err("text outside the root element".into());
        }
        let end = rest[start..].find('>').ok_or("unterminated tag")? + start;
        let tag = &rest[start + 1..end];
        if let Some(name) = tag.strip_prefix('/') {
            let open = stack.pop().ok_or(format!("unmatched </{}>", name))?;
            if open != name.trim() {
                return Err(format!("<{}> closed by </{}>", open, name));
            }
        } else if !tag.starts_with('?') && !tag.starts_with('!') {
            let name: String = tag.chars().take_while(|c| !c.is_whitespace() && *c != '/').collect();
            if stack.is_empty() {
                roots += 1;
            }
            if !tag.ends_with('/') {
                stack.push(name);
            }
        }
        rest = &rest[end + 1..];
    }
    if !rest.trim().is_empty() {
        return Err("trailing text".into());
    }
    if !stack.is_empty() {
        return Err(format!("unclosed <{}>", stack.join(", ")));
    }
    if roots != 1 {
        return Err(format!("{} root elements", roots));
    }
    Ok(())
}

/// Builds a graph on a fresh tape from leaf inputs and returns its output.
pub type Builder<'a> = dyn Fn(&mut blindspot_core::Tape, &[blindspot_core::Var]) -> blindspot_core::Var + 'a;

/// Scalar loss `Σ out ⊙ r` for a fixed random `r` (or the output itself when scalar).
fn scalar_loss(build: &Builder, inputs: &[Tensor], weights: &Option<Tensor>) -> (blindspot_core::Tape, Vec<blindspot_core::Var>, blindspot_core::Var) {
    let mut tape = blindspot_core::Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let loss = match weights {
        Some(r) => {
            let rv = tape.leaf(r.clone(), false);
            let prod = tape.mul(out, rv).unwrap();
            tape.sum(prod).unwrap()
        }
        None => out,
    };
    (tape, vars, loss)
}

/// Largest relative error between the analytic gradient and central finite
/// differences (step 1e-5) over `probes` random input coordinates.
pub fn gradient_probe_error(build: &Builder, inputs: &[Tensor], probes: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let weights = {
        let mut tape = blindspot_core::Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        (shape != [1]).then(|| random_tensor(&mut r, &shape, 1.0))
    };
    let (tape, vars, loss) = scalar_loss(build, inputs, &weights);
    let grads = tape.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| {
        let (t, _, l) = scalar_loss(build, xs, &weights);
        t.value(l).item()
    };
    let step = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let which = r.gen_range(0..inputs.len());
        let coord = r.gen_range(0..inputs[which].len());
        let mut xs = inputs.to_vec();
        let orig = xs[which].data()[coord];
        xs[which].data_mut()[coord] = orig + step;
        let hi = eval(&xs);
        xs[which].data_mut()[coord] = orig - step;
        let lo = eval(&xs);
        let numeric = (hi - lo) / (2.0 * step);
        let analytic = grads.get(vars[which]).unwrap().data()[coord];
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

/// Worst finite-difference error for every differentiable operation and for
/// a two-conv, two-linear network, 100 probes each.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    use blindspot_core::nn::SmallCnnConfig;
    let mut r = rng(11);
    let mut out = Vec::new();
    let a = random_tensor(&mut r, &[3, 4], 1.0);
    let b = random_tensor(&mut r, &[4, 2], 1.0);
    out.push(("matmul", gradient_probe_error(&|t, v| t.matmul(v[0], v[1]).unwrap(), &[a, b], 100, 1)));
    let x = random_tensor(&mut r, &[2, 3, 4, 4], 1.0);
    let bias = random_tensor(&mut r, &[3], 1.0);
    out.push(("add_bias", gradient_probe_error(&|t, v| t.add_bias(v[0], v[1]).unwrap(), &[x.clone(), bias], 100, 2)));
    let k = random_tensor(&mut r, &[4, 3, 3, 3], 0.5);
    out.push((
        "conv2d (stride 1, padding 1)",
        gradient_probe_error(&|t, v| t.conv2d(v[0], v[1], 1, 1).unwrap(), &[x.clone(), k.clone()], 100, 3),
    ));
    out.push((
        "conv2d (stride 2, padding 0)",
        gradient_probe_error(&|t, v| t.conv2d(v[0], v[1], 2, 0).unwrap(), &[x.clone(), k], 100, 4),
    ));
    out.push(("maxpool2d", gradient_probe_error(&|t, v| t.maxpool2d(v[0], 2, 2).unwrap(), &[x.clone()], 100, 5)));
    out.push(("relu", gradient_probe_error(&|t, v| t.relu(v[0]).unwrap(), &[x.clone()], 100, 6)));
    out.push(("flatten", gradient_probe_error(&|t, v| t.flatten(v[0]).unwrap(), &[x.clone()], 100, 7)));
    let y = random_tensor(&mut r, &[2, 3, 4, 4], 1.0);
    out.push(("mul", gradient_probe_error(&|t, v| t.mul(v[0], v[1]).unwrap(), &[x.clone(), y], 100, 8)));
    out.push(("sum", gradient_probe_error(&|t, v| t.sum(v[0]).unwrap(), &[x], 100, 9)));
    let logits = random_tensor(&mut r, &[5, 10], 3.0);
    out.push((
        "softmax_cross_entropy",
        gradient_probe_error(&|t, v| t.softmax_cross_entropy(v[0], &[0, 3, 9, 3, 7]).unwrap(), &[logits], 100, 10),
    ));

    let cfg = SmallCnnConfig {
        input_shape: [1, 10, 10],
        conv_channels: vec![3, 4],
        kernel: 3,
        padding: 1,
        fc_widths: vec![8],
        num_classes: 5,
        tap_post_relu: false,
    };
    let model = blindspot_core::nn::Model::small_cnn(&cfg, blindspot_core::nn::Init::seeded(5)).unwrap();
    let mut inputs = vec![random_tensor(&mut r, &[3, 1, 10, 10], 0.5)];
    inputs.extend(model.parameters().cloned());
    let m = &model;
    let build = move |t: &mut blindspot_core::Tape, v: &[blindspot_core::Var]| {
        let mut params = Vec::new();
        let mut next = 1;
        for p in m.layer_params() {
            params.push(p.as_ref().map(|_| {
                next += 2;
                (v[next - 2], v[next - 1])
            }));
        }
        let logits = m.record_forward(t, v[0], &params).unwrap();
        t.softmax_cross_entropy(logits, &[1, 4, 0]).unwrap()
    };
    out.push(("two-conv two-linear network", gradient_probe_error(&build, &inputs, 100, 12)));
    out
}
