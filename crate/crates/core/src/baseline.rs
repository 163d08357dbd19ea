//! Single-layer neural baselines and the capacity fit.
//!
//! Two architectures, both trained from scratch on the same one-image-per-class
//! data the robots see: a fully connected network with one ReLU hidden layer,
//! and a single 3x3 convolution (valid, stride 1, ReLU) followed by a linear
//! head. Parameters live in one flat vector so that the optimizer and the
//! gradient check treat both the same way.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mnist::{LabeledSet, TrainingExample};
use crate::seeding::{mix, rng_for};
use crate::tasks::TaskSpec;
use crate::GRID;

pub const MIN_WIDTH: usize = 1;
pub const MAX_WIDTH: usize = 45;
const KERNEL: usize = 3;
const CONV_OUT: usize = GRID - KERNEL + 1;
const INPUTS: usize = GRID * GRID;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BaselineError {
    #[error("width {0} outside [{MIN_WIDTH}, {MAX_WIDTH}]")]
    BadWidth(usize),
    #[error("need at least 2 output groups, got {0}")]
    TooFewGroups(usize),
    #[error("image of class {0} is not part of the task")]
    ClassNotInTask(u8),
    #[error("expected {INPUTS} inputs per image, got {0}")]
    BadInput(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("capacity fit needs at least 3 distinct widths, got {0}")]
    TooFewWidths(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Mlp,
    Cnn,
}

impl std::fmt::Display for NetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NetKind::Mlp => "mlp",
            NetKind::Cnn => "cnn",
        })
    }
}

impl std::str::FromStr for NetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<NetKind, String> {
        match s {
            "mlp" => Ok(NetKind::Mlp),
            "cnn" => Ok(NetKind::Cnn),
            _ => Err(format!("unknown network kind {s:?} (expected mlp or cnn)")),
        }
    }
}

/// Architecture: hidden neurons for the MLP, kernels for the CNN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub kind: NetKind,
    pub width: usize,
    pub outputs: usize,
}

impl NetSpec {
    pub fn new(kind: NetKind, width: usize, outputs: usize) -> Result<NetSpec, BaselineError> {
        if !(MIN_WIDTH..=MAX_WIDTH).contains(&width) {
            return Err(BaselineError::BadWidth(width));
        }
        if outputs < 2 {
            return Err(BaselineError::TooFewGroups(outputs));
        }
        Ok(NetSpec { kind, width, outputs })
    }

    fn features(&self) -> usize {
        match self.kind {
            NetKind::Mlp => self.width,
            NetKind::Cnn => self.width * CONV_OUT * CONV_OUT,
        }
    }

    /// Size of the first layer's weights (dense matrix or kernels).
    fn first_weights(&self) -> usize {
        match self.kind {
            NetKind::Mlp => self.width * INPUTS,
            NetKind::Cnn => self.width * KERNEL * KERNEL,
        }
    }

    pub fn n_params(&self) -> usize {
        self.first_weights() + self.width + self.outputs * self.features() + self.outputs
    }
}

/// Optimizer and stopping settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, max_epochs: 50, patience: 5 }
    }
}

/// Flattened images with group labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Dataset, BaselineError> {
        if inputs.is_empty() {
            return Err(BaselineError::EmptyDataset);
        }
        if let Some(bad) = inputs.iter().find(|x| x.len() != INPUTS) {
            return Err(BaselineError::BadInput(bad.len()));
        }
        assert_eq!(inputs.len(), labels.len(), "one label per input");
        Ok(Dataset { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Left group is output 0, right group output 1.
    pub fn from_training(train: &[TrainingExample], task: &TaskSpec) -> Result<Dataset, BaselineError> {
        let labels = train.iter().map(|t| group_of(task, t.class)).collect::<Result<_, _>>()?;
        Dataset::new(train.iter().map(|t| t.image.pixels.clone()).collect(), labels)
    }

    pub fn from_set(set: &LabeledSet, task: &TaskSpec) -> Result<Dataset, BaselineError> {
        let labels = set.labels.iter().map(|&c| group_of(task, c)).collect::<Result<_, _>>()?;
        Dataset::new(set.images.iter().map(|i| i.pixels.clone()).collect(), labels)
    }
}

fn group_of(task: &TaskSpec, class: u8) -> Result<usize, BaselineError> {
    match task.in_left(class) {
        Some(true) => Ok(0),
        Some(false) => Ok(1),
        None => Err(BaselineError::ClassNotInTask(class)),
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetSpec,
    pub params: Vec<f64>,
}

/// Activations kept for the backward pass.
struct Trace {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl Network {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: NetSpec, seed: u64) -> Network {
        let mut rng = rng_for(&[seed]);
        let mut params = vec![0.0; spec.n_params()];
        let (fan_in1, fan_out1) = match spec.kind {
            NetKind::Mlp => (INPUTS, spec.width),
            NetKind::Cnn => (KERNEL * KERNEL, KERNEL * KERNEL * spec.width),
        };
        let l1 = (6.0 / (fan_in1 + fan_out1) as f64).sqrt();
        let l2 = (6.0 / (spec.features() + spec.outputs) as f64).sqrt();
        let w1 = spec.first_weights();
        for p in &mut params[..w1] {
            *p = rng.random_range(-l1..l1);
        }
        let w2 = w1 + spec.width;
        for p in &mut params[w2..w2 + spec.outputs * spec.features()] {
            *p = rng.random_range(-l2..l2);
        }
        Network { spec, params }
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.spec.first_weights();
        let w2 = b1 + self.spec.width;
        let b2 = w2 + self.spec.outputs * self.spec.features();
        (b1, w2, b2)
    }

    fn forward(&self, x: &[f64]) -> Trace {
        let s = &self.spec;
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let nf = s.features();
        let mut pre = vec![0.0; nf];
        match s.kind {
            NetKind::Mlp => {
                for (h, z) in pre.iter_mut().enumerate() {
                    let row = &p[h * INPUTS..(h + 1) * INPUTS];
                    *z = p[b1 + h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                }
            }
            NetKind::Cnn => {
                for k in 0..s.width {
                    let kern = &p[k * 9..k * 9 + 9];
                    for i in 0..CONV_OUT {
                        for j in 0..CONV_OUT {
                            let mut z = p[b1 + k];
                            for a in 0..KERNEL {
                                for b in 0..KERNEL {
                                    z += kern[a * KERNEL + b] * x[(i + a) * GRID + j + b];
                                }
                            }
                            pre[(k * CONV_OUT + i) * CONV_OUT + j] = z;
                        }
                    }
                }
            }
        }
        let hidden: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        let logits = (0..s.outputs)
            .map(|o| p[b2 + o] + p[w2 + o * nf..w2 + (o + 1) * nf].iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>())
            .collect();
        Trace { pre, hidden, logits }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).logits
    }

    /// Argmax output; ties go to the lower index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits(x);
        (0..l.len()).fold(0, |best, i| if l[i] > l[best] { i } else { best })
    }

    pub fn accuracy(&self, data: &Dataset) -> f64 {
        let correct = data.inputs.iter().zip(&data.labels).filter(|(x, &y)| self.predict(x) == y).count();
        correct as f64 / data.len() as f64
    }

    /// Mean cross-entropy over the dataset.
    pub fn loss(&self, data: &Dataset) -> f64 {
        data.inputs
            .iter()
            .zip(&data.labels)
            .map(|(x, &y)| {
                let l = self.logits(x);
                let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + l.iter().map(|z| (z - m).exp()).sum::<f64>().ln() - l[y]
            })
            .sum::<f64>()
            / data.len() as f64
    }

    /// Mean cross-entropy and its gradient with respect to `params`.
    pub fn loss_and_grad(&self, data: &Dataset) -> (f64, Vec<f64>) {
        let s = &self.spec;
        let (b1, w2, b2) = self.offsets();
        let nf = s.features();
        let scale = 1.0 / data.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (x, &y) in data.inputs.iter().zip(&data.labels) {
            let t = self.forward(x);
            let prob = softmax(&t.logits);
            loss -= prob[y].ln() * scale;
            let dlogit: Vec<f64> = (0..s.outputs).map(|o| (prob[o] - if o == y { 1.0 } else { 0.0 }) * scale).collect();
            let mut dpre = vec![0.0; nf];
            for (o, &dl) in dlogit.iter().enumerate() {
                grad[b2 + o] += dl;
                let row = w2 + o * nf;
                for f in 0..nf {
                    grad[row + f] += dl * t.hidden[f];
                    dpre[f] += dl * self.params[row + f];
                }
            }
            for f in 0..nf {
                if t.pre[f] <= 0.0 {
                    dpre[f] = 0.0;
                }
            }
            match s.kind {
                NetKind::Mlp => {
                    for (h, &d) in dpre.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        grad[b1 + h] += d;
                        for (g, v) in grad[h * INPUTS..(h + 1) * INPUTS].iter_mut().zip(x) {
                            *g += d * v;
                        }
                    }
                }
                NetKind::Cnn => {
                    for k in 0..s.width {
                        for i in 0..CONV_OUT {
                            for j in 0..CONV_OUT {
                                let d = dpre[(k * CONV_OUT + i) * CONV_OUT + j];
                                if d == 0.0 {
                                    continue;
                                }
                                grad[b1 + k] += d;
                                for a in 0..KERNEL {
                                    for b in 0..KERNEL {
                                        grad[k * 9 + a * KERNEL + b] += d * x[(i + a) * GRID + j + b];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (loss, grad)
    }
}

/// Adam state over a flat parameter vector.
struct Adam {
    cfg: TrainConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(cfg: TrainConfig, n: usize) -> Adam {
        Adam { cfg, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let c = self.cfg;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            params[i] -= c.learning_rate * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + c.epsilon);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Best test accuracy seen after any epoch.
    pub best_accuracy: f64,
    pub epochs: usize,
    pub early_stopped: bool,
    /// Training loss before each update.
    pub losses: Vec<f64>,
}

/// Full-batch Adam with early stopping on test accuracy.
pub fn train(spec: NetSpec, train_set: &Dataset, test_set: &Dataset, seed: u64, cfg: &TrainConfig) -> TrainOutcome {
    let mut net = Network::init(spec, seed);
    let mut adam = Adam::new(*cfg, net.params.len());
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut losses = Vec::with_capacity(cfg.max_epochs);
    let mut epochs = 0;
    let mut early_stopped = false;
    while epochs < cfg.max_epochs {
        let (loss, grad) = net.loss_and_grad(train_set);
        losses.push(loss);
        adam.step(&mut net.params, &grad);
        epochs += 1;
        let acc = net.accuracy(test_set);
        if acc > best {
            best = acc;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                early_stopped = true;
                break;
            }
        }
    }
    TrainOutcome { best_accuracy: best.max(0.0), epochs, early_stopped, losses }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: NetKind,
    pub width: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub stddev: f64,
}

impl SweepRow {
    pub fn to_line(&self) -> String {
        format!("{} {} {} {}", self.kind, self.width, self.mean, self.stddev)
    }
}

/// Trains `seeds` networks per width and averages their best test accuracies.
pub fn sweep(
    kind: NetKind,
    widths: &[usize],
    seeds: usize,
    master_seed: u64,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>, BaselineError> {
    let outputs = train_set.labels.iter().chain(&test_set.labels).max().map_or(0, |m| m + 1).max(2);
    let specs: Vec<NetSpec> = widths.iter().map(|&w| NetSpec::new(kind, w, outputs)).collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, usize)> = (0..specs.len()).flat_map(|i| (0..seeds).map(move |s| (i, s))).collect();
    let accs: Vec<f64> = jobs
        .par_iter()
        .map(|&(i, s)| {
            let seed = mix(&[master_seed, kind as u64, specs[i].width as u64, s as u64]);
            train(specs[i], train_set, test_set, seed, cfg).best_accuracy
        })
        .collect();
    Ok(specs
        .iter()
        .zip(accs.chunks(seeds.max(1)))
        .map(|(spec, a)| {
            let a = if seeds == 0 { Vec::new() } else { a.to_vec() };
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            SweepRow { kind, width: spec.width, accuracies: a, mean, stddev: var.sqrt() }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capacity {
    Width(f64),
    NoMatch,
}

impl std::fmt::Display for Capacity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Capacity::Width(w) => write!(f, "{w:.2}"),
            Capacity::NoMatch => f.write_str("no match"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityFit {
    /// `a + b w + c w^2`, as `[a, b, c]`.
    pub coeffs: [f64; 3],
    pub capacity: Capacity,
    /// All mean accuracies were equal, so no curve was fitted.
    pub degenerate: bool,
}

/// Least-squares quadratic through `(width, accuracy)` points, sorted by
/// width first so that the result does not depend on input order.
pub fn fit_quadratic(points: &[(f64, f64)]) -> [f64; 3] {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    // Scale widths to about [0, 1] to keep the normal equations well conditioned.
    let s = pts.iter().map(|p| p.0.abs()).fold(1.0, f64::max);
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [0.0; 3];
    for &(w, y) in &pts {
        let u = w / s;
        let row = [1.0, u, u * u];
        for i in 0..3 {
            atb[i] += row[i] * y;
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    let c = solve3(ata, atb);
    [c[0], c[1] / s, c[2] / (s * s)]
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..3 {
            let f = a[r][col] / a[col][col];
            for k in col..3 {
                a[r][k] -= f * a[col][k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        x[r] = (b[r] - (r + 1..3).map(|k| a[r][k] * x[k]).sum::<f64>()) / a[r][r];
    }
    x
}

/// Real roots of `c w^2 + b w + a = 0`, computed without cancellation.
fn roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    if c == 0.0 {
        return if b == 0.0 { Vec::new() } else { vec![-a / b] };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Vec::new();
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    if q == 0.0 {
        return vec![0.0];
    }
    vec![q / c, a / q]
}

/// Width at which the fitted accuracy curve first reaches `robot_accuracy`
/// within `[1, 45]`.
pub fn capacity(rows: &[(usize, f64)], robot_accuracy: f64) -> Result<CapacityFit, BaselineError> {
    let mut widths: Vec<usize> = rows.iter().map(|r| r.0).collect();
    widths.sort_unstable();
    widths.dedup();
    let first = rows.first().ok_or(BaselineError::TooFewWidths(0))?.1;
    if rows.iter().all(|r| r.1 == first) {
        let capacity = if first == robot_accuracy { Capacity::Width(MIN_WIDTH as f64) } else { Capacity::NoMatch };
        return Ok(CapacityFit { coeffs: [first, 0.0, 0.0], capacity, degenerate: true });
    }
    if widths.len() < 3 {
        return Err(BaselineError::TooFewWidths(widths.len()));
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|&(w, a)| (w as f64, a)).collect();
    let coeffs = fit_quadratic(&pts);
    let [a, b, c] = coeffs;
    let (lo, hi) = (MIN_WIDTH as f64, MAX_WIDTH as f64);
    let capacity = roots(a - robot_accuracy, b, c)
        .into_iter()
        .filter(|r| r.is_finite() && (lo..=hi).contains(r))
        .min_by(f64::total_cmp)
        .map_or(Capacity::NoMatch, Capacity::Width);
    Ok(CapacityFit { coeffs, capacity, degenerate: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_data(n: usize, outputs: usize, seed: u64) -> Dataset {
        let mut rng = rng_for(&[seed]);
        let inputs = (0..n).map(|_| (0..INPUTS).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let labels = (0..n).map(|i| i % outputs).collect();
        Dataset::new(inputs, labels).unwrap()
    }

    fn gradient_check(kind: NetKind, width: usize, seed: u64) {
        let spec = NetSpec::new(kind, width, 2).unwrap();
        let net = Network::init(spec, seed);
        let data = random_data(3, 2, seed + 100);
        let (_, grad) = net.loss_and_grad(&data);
        let mut rng = rng_for(&[seed, 7]);
        let h = 1e-5;
        for _ in 0..60 {
            let i = rng.random_range(0..net.params.len());
            let mut plus = net.clone();
            plus.params[i] += h;
            let mut minus = net.clone();
            minus.params[i] -= h;
            let numeric = (plus.loss(&data) - minus.loss(&data)) / (2.0 * h);
            let scale = grad[i].abs().max(numeric.abs());
            let err = if scale > 1e-6 { (grad[i] - numeric).abs() / scale } else { (grad[i] - numeric).abs() };
            assert!(err < 1e-4, "{kind} param {i}: analytic {} numeric {numeric}", grad[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            gradient_check(NetKind::Mlp, 4, seed);
            gradient_check(NetKind::Cnn, 2, seed);
        }
    }

    #[test]
    fn loss_non_increasing_at_small_step() {
        let data = random_data(2, 2, 5);
        for kind in [NetKind::Mlp, NetKind::Cnn] {
            let cfg = TrainConfig { learning_rate: 1e-4, patience: usize::MAX, ..TrainConfig::default() };
            let out = train(NetSpec::new(kind, 8, 2).unwrap(), &data, &data, 3, &cfg);
            assert_eq!(out.losses.len(), 50);
            for w in out.losses.windows(2) {
                assert!(w[1] <= w[0], "{kind}: {} then {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = random_data(2, 2, 1);
        let test = random_data(20, 2, 2);
        let spec = NetSpec::new(NetKind::Mlp, 5, 2).unwrap();
        let cfg = TrainConfig::default();
        assert_eq!(train(spec, &data, &test, 9, &cfg), train(spec, &data, &test, 9, &cfg));
    }

    #[test]
    fn width_limits() {
        assert_eq!(NetSpec::new(NetKind::Mlp, 0, 2), Err(BaselineError::BadWidth(0)));
        assert_eq!(NetSpec::new(NetKind::Cnn, 46, 2), Err(BaselineError::BadWidth(46)));
        assert_eq!(NetSpec::new(NetKind::Cnn, 45, 1), Err(BaselineError::TooFewGroups(1)));
        let s = NetSpec::new(NetKind::Cnn, 3, 2).unwrap();
        assert_eq!(s.n_params(), 27 + 3 + 2 * 3 * 144 + 2);
    }

    #[test]
    fn single_width_single_seed_sweep() {
        let data = random_data(2, 2, 1);
        let rows = sweep(NetKind::Mlp, &[1], 1, 0, &data, &data, &TrainConfig::default()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].accuracies.len(), 1);
        assert_eq!(rows[0].stddev, 0.0);
    }

    #[test]
    fn linear_sweep_capacity() {
        let rows: Vec<(usize, f64)> = (1..=45).map(|w| (w, 0.5 + 0.01 * w as f64)).collect();
        let fit = capacity(&rows, 0.6).unwrap();
        let Capacity::Width(w) = fit.capacity else { panic!("expected a match") };
        assert!((w - 10.0).abs() < 1e-6, "{w}");
    }

    #[test]
    fn no_match_above_the_curve() {
        let rows: Vec<(usize, f64)> = (1..=45).map(|w| (w, 0.5 + 0.005 * w as f64)).collect();
        assert_eq!(capacity(&rows, 0.95).unwrap().capacity, Capacity::NoMatch);
    }

    #[test]
    fn degenerate_fit_falls_back() {
        let rows: Vec<(usize, f64)> = (1..=5).map(|w| (w, 0.7)).collect();
        let fit = capacity(&rows, 0.7).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.capacity, Capacity::Width(1.0));
        assert_eq!(capacity(&rows, 0.8).unwrap().capacity, Capacity::NoMatch);
    }

    #[test]
    fn quadratic_roots_are_stable() {
        // (w - 1e-8)(w - 1e8)
        let r = roots(1.0, -(1e8 + 1e-8), 1.0);
        assert!(r.iter().any(|&x| (x - 1e-8).abs() < 1e-20));
        assert!(r.iter().any(|&x| (x - 1e8).abs() < 1e-4));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(z in prop::collection::vec(-50.0f64..50.0, 2..10)) {
            let p = softmax(&z);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn capacity_ignores_row_order(seed in any::<u64>(), robot in 0.55f64..0.9) {
            let mut rng = rng_for(&[seed]);
            let mut rows: Vec<(usize, f64)> =
                (1..=45).map(|w| (w, 0.5 + 0.01 * w as f64 - 1e-4 * (w * w) as f64 + rng.random_range(-0.02..0.02))).collect();
            let a = capacity(&rows, robot).unwrap();
            rows.reverse();
            let b = capacity(&rows, robot).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
