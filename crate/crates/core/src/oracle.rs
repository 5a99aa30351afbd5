//! Plaintext reference network: valid convolutions, square activations on
//! every layer but the last, no biases, softmax cross-entropy, plain SGD.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CnnConfig, ConvSpec, FcSpec};

/// Filters per conv layer, flat `[k][i][x][y]`; weights per FC layer, flat `[o][w]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlainModel {
    pub filters: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

impl PlainModel {
    /// Uniform in ±1/√fan-in.
    pub fn init(cfg: &CnnConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |len: usize, fan_in: usize| {
            let k = 1.0 / (fan_in as f64).sqrt();
            (0..len).map(|_| rng.random_range(-k..=k)).collect::<Vec<f64>>()
        };
        let filters = cfg.conv().iter().map(|c| draw(c.kernel_params(), c.channels * c.filter_side * c.filter_side)).collect();
        let weights = cfg.fc().iter().map(|w| draw(w.inputs * w.outputs, w.inputs)).collect();
        PlainModel { filters, weights }
    }

    pub fn zeros(cfg: &CnnConfig) -> Self {
        PlainModel {
            filters: cfg.conv().iter().map(|c| vec![0.0; c.kernel_params()]).collect(),
            weights: cfg.fc().iter().map(|w| vec![0.0; w.inputs * w.outputs]).collect(),
        }
    }

    pub fn check(&self, cfg: &CnnConfig) -> Result<()> {
        let ok = self.filters.len() == cfg.c()
            && self.weights.len() == cfg.f()
            && self.filters.iter().zip(cfg.conv()).all(|(f, c)| f.len() == c.kernel_params())
            && self.weights.iter().zip(cfg.fc()).all(|(w, s)| w.len() == s.inputs * s.outputs);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("model parameters do not match configuration".into()))
        }
    }

    /// All parameters in a fixed order (filters by layer, then weights by layer).
    pub fn flatten(&self) -> Vec<f64> {
        self.filters.iter().chain(&self.weights).flatten().copied().collect()
    }

    fn axpy(&mut self, a: f64, g: &PlainModel) {
        for (p, q) in self.filters.iter_mut().chain(self.weights.iter_mut()).zip(g.filters.iter().chain(&g.weights)) {
            for (x, y) in p.iter_mut().zip(q) {
                *x += a * y;
            }
        }
    }
}

/// Per-image intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// Input of each conv layer, flat `[i][x][y]`.
    pub conv_inputs: Vec<Vec<f64>>,
    /// Pre-activation of each conv layer, flat `[k][u][v]`.
    pub conv_preacts: Vec<Vec<f64>>,
    /// Input of each FC layer.
    pub fc_inputs: Vec<Vec<f64>>,
    /// Pre-activation of each FC layer; the last one is the logits.
    pub fc_preacts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.fc_preacts.last().unwrap()
    }
}

fn conv(cfg: &CnnConfig, l: usize, input: &[f64], filt: &[f64]) -> Vec<f64> {
    let c = cfg.conv()[l];
    let (a, b, e, g, d) = (c.channels, c.input_side, c.filters, c.filter_side, c.stride);
    let o = c.output_side();
    let mut out = vec![0.0; e * o * o];
    for k in 0..e {
        for u in 0..o {
            for v in 0..o {
                let mut s = 0.0;
                for i in 0..a {
                    for x in 0..g {
                        for y in 0..g {
                            s += input[(i * b + d * u + x) * b + d * v + y] * filt[((k * a + i) * g + x) * g + y];
                        }
                    }
                }
                out[(k * o + u) * o + v] = s;
            }
        }
    }
    out
}

fn dense(rows: usize, cols: usize, m: &[f64], x: &[f64]) -> Vec<f64> {
    (0..rows).map(|r| (0..cols).map(|w| m[r * cols + w] * x[w]).sum()).collect()
}

pub fn plain_forward_one(cfg: &CnnConfig, model: &PlainModel, image: &[f64]) -> Trace {
    let mut t = Trace { conv_inputs: vec![], conv_preacts: vec![], fc_inputs: vec![], fc_preacts: vec![] };
    let mut x = image.to_vec();
    for l in 0..cfg.c() {
        let z = conv(cfg, l, &x, &model.filters[l]);
        t.conv_inputs.push(std::mem::take(&mut x));
        x = z.iter().map(|v| v * v).collect();
        t.conv_preacts.push(z);
    }
    let f = cfg.f();
    for l in 0..f {
        let s = cfg.fc()[l];
        let z = dense(s.outputs, s.inputs, &model.weights[l], &x);
        t.fc_inputs.push(std::mem::take(&mut x));
        if l + 1 < f {
            x = z.iter().map(|v| v * v).collect();
        }
        t.fc_preacts.push(z);
    }
    t
}

/// Forward pass over a batch of flat `[i][x][y]` images.
pub fn plain_forward(cfg: &CnnConfig, model: &PlainModel, images: &[Vec<f64>]) -> Vec<Trace> {
    images.iter().map(|im| plain_forward_one(cfg, model, im)).collect()
}

/// Max-subtracted softmax cross-entropy: returns (loss, softmax − one-hot).
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - m);
    let grad = exps.iter().enumerate().map(|(i, e)| e / sum - if i == label { 1.0 } else { 0.0 }).collect();
    (loss, grad)
}

fn check_batch(cfg: &CnnConfig, images: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(Error::Shape(format!("{} images but {} labels", images.len(), labels.len())));
    }
    if let Some(im) = images.iter().find(|im| im.len() != cfg.image_len()) {
        return Err(Error::Shape(format!("image of {} values, expected {}", im.len(), cfg.image_len())));
    }
    if let Some(l) = labels.iter().find(|l| **l >= cfg.classes()) {
        return Err(Error::Shape(format!("label {l} out of range")));
    }
    Ok(())
}

/// Gradients summed over the batch, and the batch-mean loss.
pub fn plain_gradients(cfg: &CnnConfig, model: &PlainModel, images: &[Vec<f64>], labels: &[usize]) -> Result<(PlainModel, f64)> {
    check_batch(cfg, images, labels)?;
    let mut grads = PlainModel::zeros(cfg);
    let mut loss = 0.0;
    let f = cfg.f();
    for (im, &label) in images.iter().zip(labels) {
        let t = plain_forward_one(cfg, model, im);
        let (li, mut g) = softmax_cross_entropy(t.logits(), label);
        loss += li;
        for l in (0..f).rev() {
            let s = cfg.fc()[l];
            let z = &t.fc_preacts[l];
            let delta: Vec<f64> = if l + 1 < f { g.iter().zip(z).map(|(g, z)| 2.0 * g * z).collect() } else { g };
            let x = &t.fc_inputs[l];
            let (gw, m) = (&mut grads.weights[l], &model.weights[l]);
            let mut gin = vec![0.0; s.inputs];
            for r in 0..s.outputs {
                for w in 0..s.inputs {
                    gw[r * s.inputs + w] += delta[r] * x[w];
                    gin[w] += m[r * s.inputs + w] * delta[r];
                }
            }
            g = gin;
        }
        for l in (0..cfg.c()).rev() {
            let c = cfg.conv()[l];
            let (a, b, e, gs, d) = (c.channels, c.input_side, c.filters, c.filter_side, c.stride);
            let o = c.output_side();
            let z = &t.conv_preacts[l];
            let delta: Vec<f64> = g.iter().zip(z).map(|(g, z)| 2.0 * g * z).collect();
            let x = &t.conv_inputs[l];
            let (gf, filt) = (&mut grads.filters[l], &model.filters[l]);
            let mut gin = vec![0.0; a * b * b];
            for k in 0..e {
                for u in 0..o {
                    for v in 0..o {
                        let dv = delta[(k * o + u) * o + v];
                        for i in 0..a {
                            for xx in 0..gs {
                                for yy in 0..gs {
                                    let pi = (i * b + d * u + xx) * b + d * v + yy;
                                    let fi = ((k * a + i) * gs + xx) * gs + yy;
                                    gf[fi] += dv * x[pi];
                                    gin[pi] += dv * filt[fi];
                                }
                            }
                        }
                    }
                }
            }
            g = gin;
        }
    }
    Ok((grads, loss / images.len() as f64))
}

/// One SGD step on the batch-mean loss.
pub fn plain_backward_step(
    cfg: &CnnConfig,
    model: &PlainModel,
    images: &[Vec<f64>],
    labels: &[usize],
    lr: f64,
) -> Result<(PlainModel, f64)> {
    let (grads, loss) = plain_gradients(cfg, model, images, labels)?;
    let mut next = model.clone();
    next.axpy(-lr / images.len() as f64, &grads);
    Ok((next, loss))
}

/// Mini-batch SGD over `epochs` passes in order; returns the model and the
/// mean loss of each epoch.
pub fn train_plain(
    cfg: &CnnConfig,
    model: &PlainModel,
    images: &[Vec<f64>],
    labels: &[usize],
    lr: f64,
    epochs: usize,
    batch: usize,
) -> Result<(PlainModel, Vec<f64>)> {
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut m = model.clone();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut total = 0.0;
        for (x, y) in images.chunks(batch).zip(labels.chunks(batch)) {
            let (next, loss) = plain_backward_step(cfg, &m, x, y, lr)?;
            m = next;
            total += loss * x.len() as f64;
        }
        losses.push(total / images.len().max(1) as f64);
    }
    Ok((m, losses))
}

pub fn batch_loss(cfg: &CnnConfig, model: &PlainModel, images: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = images.iter().zip(labels).map(|(im, &l)| softmax_cross_entropy(plain_forward_one(cfg, model, im).logits(), l).0).sum();
    total / images.len() as f64
}

pub fn predict(logits: &[f64]) -> usize {
    logits.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
}

pub fn accuracy(cfg: &CnnConfig, model: &PlainModel, images: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = images.iter().zip(labels).filter(|(im, &l)| predict(plain_forward_one(cfg, model, im).logits()) == l).count();
    hits as f64 / images.len().max(1) as f64
}

/// A random small network: 1 or 2 conv layers on an input of side at most
/// 10, 1 or 2 FC layers, `n` images per ciphertext. Returns the config and a
/// slot count that allows a replication factor of `r` (a power of two).
pub fn random_small_config(rng: &mut impl Rng, n: usize, r: usize) -> (CnnConfig, usize) {
    loop {
        let c = rng.random_range(1..=2usize);
        let f = rng.random_range(1..=2usize);
        let beta0 = rng.random_range(4..=10usize);
        let mut channels = rng.random_range(1..=3usize);
        let mut side = beta0;
        let mut conv = Vec::with_capacity(c);
        for _ in 0..c {
            let g = rng.random_range(1..=3usize.min(side));
            let d = rng.random_range(1..=2usize);
            let e = rng.random_range(1..=4usize);
            let spec = ConvSpec::new(channels, side, e, g, d);
            side = spec.output_side();
            channels = e;
            conv.push(spec);
        }
        let mut inputs = channels * side * side;
        let mut fc = Vec::with_capacity(f);
        for l in 0..f {
            let o = if l + 1 == f { rng.random_range(2..=4usize) } else { rng.random_range(2..=6usize) };
            fc.push(FcSpec::new(inputs, o));
            inputs = o;
        }
        let Ok(cfg) = CnnConfig::new(conv, fc, n) else { continue };
        let slots = (n * side * side).next_power_of_two() * r;
        return (cfg, slots.max(2));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{preset, ConvSpec, FcSpec};

    fn tiny() -> CnnConfig {
        CnnConfig::new(vec![ConvSpec::new(2, 6, 2, 2, 2), ConvSpec::new(2, 3, 2, 2, 1)], vec![FcSpec::new(8, 3), FcSpec::new(3, 3)], 2)
            .unwrap()
    }

    fn images(cfg: &CnnConfig, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| (0..cfg.image_len()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn identity_conv_squares() {
        let cfg = CnnConfig::new(vec![ConvSpec::new(1, 1, 1, 1, 1)], vec![FcSpec::new(1, 1)], 1).unwrap();
        let m = PlainModel { filters: vec![vec![1.0]], weights: vec![vec![1.0]] };
        assert_eq!(plain_forward_one(&cfg, &m, &[3.0]).logits(), &[9.0]);
    }

    #[test]
    fn figure_dot_product() {
        let m = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(dense(1, 4, &m, &[20.0, 28.0, 84.0, 92.0]), vec![112.0]);
    }

    #[test]
    fn softmax_closed_form() {
        let (_, g) = softmax_cross_entropy(&[2f64.ln(), 0.0], 0);
        assert!((g[0] + 1.0 / 3.0).abs() < 1e-15 && (g[1] - 1.0 / 3.0).abs() < 1e-15);
        let (l, g) = softmax_cross_entropy(&[0.5; 4], 2);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert_eq!(g, vec![0.25, 0.25, -0.75, 0.25]);
        let (l, _) = softmax_cross_entropy(&[60.0, 0.0, 0.0], 0);
        assert!(l < 1e-20);
    }

    #[test]
    fn lr_zero_is_identity() {
        let cfg = tiny();
        let m = PlainModel::init(&cfg, 1);
        let x = images(&cfg, 4, 2);
        let (m2, _) = plain_backward_step(&cfg, &m, &x, &[0, 1, 2, 0], 0.0).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn finite_differences() {
        let cfg = tiny();
        let m = PlainModel::init(&cfg, 3);
        let x = images(&cfg, 3, 4);
        let labels = [2, 0, 1];
        let (g, _) = plain_gradients(&cfg, &m, &x, &labels).unwrap();
        let analytic: Vec<f64> = g.flatten().iter().map(|v| v / 3.0).collect();
        let h = 1e-4;
        let mut idx = 0;
        for which in 0..2 {
            let groups = if which == 0 { m.filters.len() } else { m.weights.len() };
            for l in 0..groups {
                let len = if which == 0 { m.filters[l].len() } else { m.weights[l].len() };
                for p in 0..len {
                    let mut plus = m.clone();
                    let mut minus = m.clone();
                    if which == 0 {
                        plus.filters[l][p] += h;
                        minus.filters[l][p] -= h;
                    } else {
                        plus.weights[l][p] += h;
                        minus.weights[l][p] -= h;
                    }
                    let fd = (batch_loss(&cfg, &plus, &x, &labels) - batch_loss(&cfg, &minus, &x, &labels)) / (2.0 * h);
                    let a = analytic[idx];
                    let err = (fd - a).abs() / a.abs().max(fd.abs()).max(1e-3);
                    assert!(err <= 1e-5, "param {idx}: fd {fd} vs analytic {a}");
                    idx += 1;
                }
            }
        }
    }

    #[test]
    fn step_decreases_loss_on_separable_toy() {
        let cfg = CnnConfig::new(vec![ConvSpec::new(1, 2, 2, 1, 1)], vec![FcSpec::new(8, 2)], 2).unwrap();
        let x = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0], vec![0.9, 0.1, 0.0, 0.0], vec![0.0, 0.0, 0.1, 0.9]];
        let labels = [0, 1, 0, 1];
        let m = PlainModel::init(&cfg, 5);
        let before = batch_loss(&cfg, &m, &x, &labels);
        let (m2, l) = plain_backward_step(&cfg, &m, &x, &labels, 0.1).unwrap();
        assert!((l - before).abs() < 1e-12);
        assert!(batch_loss(&cfg, &m2, &x, &labels) < before);
    }

    #[test]
    fn deterministic_init() {
        let cfg = preset("refining").unwrap().cfg;
        assert_eq!(PlainModel::init(&cfg, 9), PlainModel::init(&cfg, 9));
        assert_ne!(PlainModel::init(&cfg, 9), PlainModel::init(&cfg, 10));
        let m = PlainModel::init(&cfg, 9);
        let k = 1.0 / 9f64.sqrt();
        assert!(m.filters[0].iter().all(|v| v.abs() <= k));
    }
}
