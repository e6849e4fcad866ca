//! Model specifications, initializers and the synthetic datasets used by the
//! experiments, including the scalar toy regressor with a redundant
//! parametrization `phi(theta)`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Segment, Tensor, WeightVector};
use crate::rng::Seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub(crate) fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Relu => a.max(0.0),
        }
    }

    /// Derivative given the pre-activation `a` and the output `h = act(a)`.
    pub(crate) fn derivative(self, a: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// Softmax over the final affine layer with cross-entropy loss.
    SoftmaxXent,
    /// Real outputs with squared-error loss, read as the likelihood N(z, 1/2).
    SquaredError,
}

/// Fully connected network: `sizes[0]` inputs, hidden widths, `sizes.last()` outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    sizes: Vec<usize>,
    activation: Activation,
    head: Head,
}

impl ModelSpec {
    pub fn new(sizes: Vec<usize>, activation: Activation, head: Head) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::arg("a model needs an input size and at least one layer"));
        }
        if sizes.contains(&0) {
            return Err(Error::arg("layer sizes must be positive"));
        }
        if head == Head::SoftmaxXent && *sizes.last().unwrap() < 2 {
            return Err(Error::arg("a softmax head needs at least two classes"));
        }
        Ok(ModelSpec { sizes, activation, head })
    }

    /// `d -> hidden... -> classes` classifier.
    pub fn classifier(sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        ModelSpec::new(sizes, activation, Head::SoftmaxXent)
    }

    pub fn regressor(sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        ModelSpec::new(sizes, activation, Head::SquaredError)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn is_classifier(&self) -> bool {
        self.head == Head::SoftmaxXent
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Total parameter count k.
    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    /// Row-major `(out, in)` weight then bias, per layer.
    pub fn layout(&self) -> Vec<Segment> {
        self.sizes
            .windows(2)
            .enumerate()
            .flat_map(|(l, p)| {
                [
                    Segment::new(format!("layer{l}.weight"), vec![p[1], p[0]]),
                    Segment::new(format!("layer{l}.bias"), vec![p[1]]),
                ]
            })
            .collect()
    }

    pub fn zero_weights(&self) -> WeightVector {
        WeightVector::new(vec![0.0; self.num_params()], self.layout()).expect("layout matches")
    }

    /// Zero biases, weights drawn from N(0, 2 / fan_in).
    pub fn init_weights(&self, seed: Seed) -> WeightVector {
        let mut rng = seed.rng();
        let mut values = Vec::with_capacity(self.num_params());
        for p in self.sizes.windows(2) {
            let std = (2.0 / p[0] as f64).sqrt();
            for _ in 0..p[0] * p[1] {
                let z: f64 = StandardNormal.sample(&mut rng);
                values.push(std * z);
            }
            values.extend(std::iter::repeat_n(0.0, p[1]));
        }
        WeightVector::new(values, self.layout()).expect("layout matches")
    }

    pub(crate) fn check_weights(&self, w: &WeightVector) -> Result<()> {
        if w.dim() != self.num_params() {
            return Err(Error::Shape {
                expected: format!("{} weights", self.num_params()),
                got: format!("{}", w.dim()),
            });
        }
        Ok(())
    }
}

/// Class index or real target for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    Real(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Targets {
    Classes { labels: Vec<usize>, num_classes: usize },
    Reals(Vec<f64>),
    /// Plain observations (the toy regression task).
    None,
}

/// N labelled samples, `inputs` is N×d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    inputs: Tensor,
    targets: Targets,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, targets: Targets) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(Error::Shape { expected: "N×d inputs".into(), got: format!("{:?}", inputs.shape()) });
        }
        let n = inputs.rows();
        if n == 0 {
            return Err(Error::arg("dataset must be nonempty"));
        }
        match &targets {
            Targets::Classes { labels, num_classes } => {
                if labels.len() != n {
                    return Err(Error::arg("label count does not match sample count"));
                }
                if let Some(&bad) = labels.iter().find(|&&y| y >= *num_classes) {
                    return Err(Error::arg(format!("label {bad} outside [0, {num_classes})")));
                }
            }
            Targets::Reals(t) => {
                if t.len() != n {
                    return Err(Error::arg("target count does not match sample count"));
                }
            }
            Targets::None => {}
        }
        Ok(LabeledDataset { inputs, targets })
    }

    pub fn classification(rows: &[Vec<f64>], labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        LabeledDataset::new(Tensor::from_rows(rows)?, Targets::Classes { labels, num_classes })
    }

    pub fn regression(rows: &[Vec<f64>], targets: Vec<f64>) -> Result<Self> {
        LabeledDataset::new(Tensor::from_rows(rows)?, Targets::Reals(targets))
    }

    /// Scalar observations with no labels, stored as N×1 inputs.
    pub fn observations(xs: Vec<f64>) -> Result<Self> {
        let n = xs.len();
        LabeledDataset::new(Tensor::new(xs, vec![n, 1])?, Targets::None)
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn label(&self, i: usize) -> Option<Label> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(Label::Class(labels[i])),
            Targets::Reals(t) => Some(Label::Real(t[i])),
            Targets::None => None,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes { num_classes, .. } => Some(*num_classes),
            _ => None,
        }
    }

    /// Scalar observations of a one-column unlabeled dataset.
    pub fn scalars(&self) -> &[f64] {
        self.inputs.data()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.input(i));
        }
        let inputs = Tensor::new(data, vec![idx.len(), d])?;
        let targets = match &self.targets {
            Targets::Classes { labels, num_classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
            Targets::Reals(t) => Targets::Reals(idx.iter().map(|&i| t[i]).collect()),
            Targets::None => Targets::None,
        };
        LabeledDataset::new(inputs, targets)
    }

    /// Keep only samples of the first `k` classes, relabelled as a `k`-class task.
    pub fn restrict_classes(&self, k: usize) -> Result<Self> {
        let Targets::Classes { labels, num_classes } = &self.targets else {
            return Err(Error::arg("restrict_classes needs class labels"));
        };
        if k < 2 || k > *num_classes {
            return Err(Error::arg(format!("cannot restrict {num_classes} classes to {k}")));
        }
        let idx: Vec<usize> = (0..self.len()).filter(|&i| labels[i] < k).collect();
        let mut out = self.subset(&idx)?;
        if let Targets::Classes { num_classes, .. } = &mut out.targets {
            *num_classes = k;
        }
        Ok(out)
    }

    /// Copy of the dataset with sample `target` overwritten by sample `source`.
    pub fn replace_sample(&self, target: usize, source: usize) -> Result<Self> {
        if target >= self.len() || source >= self.len() {
            return Err(Error::arg("sample index out of range"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx[target] = source;
        self.subset(&idx)
    }

    /// Copy with sample `target` overwritten by sample `source` of `pool`.
    pub fn swap_in(&self, target: usize, pool: &LabeledDataset, source: usize) -> Result<Self> {
        if target >= self.len() || source >= pool.len() {
            return Err(Error::arg("sample index out of range"));
        }
        if pool.input_dim() != self.input_dim() {
            return Err(Error::Shape { expected: format!("{} features", self.input_dim()), got: pool.input_dim().to_string() });
        }
        let d = self.input_dim();
        let mut data = self.inputs.data().to_vec();
        data[target * d..(target + 1) * d].copy_from_slice(pool.input(source));
        let mut targets = self.targets.clone();
        match (&mut targets, &pool.targets) {
            (Targets::Classes { labels, .. }, Targets::Classes { labels: src, .. }) => labels[target] = src[source],
            (Targets::Reals(t), Targets::Reals(src)) => t[target] = src[source],
            (Targets::None, Targets::None) => {}
            _ => return Err(Error::arg("pool targets do not match the dataset")),
        }
        LabeledDataset::new(Tensor::new(data, vec![self.len(), d])?, targets)
    }

    /// Copy with `delta` added to input coordinate `coord` of `sample`
    /// (every sample when `sample` is `None`).
    pub fn perturb_input(&self, sample: Option<usize>, coord: usize, delta: f64) -> Result<Self> {
        let d = self.input_dim();
        if coord >= d {
            return Err(Error::arg("input coordinate out of range"));
        }
        let mut data = self.inputs.data().to_vec();
        match sample {
            Some(i) if i >= self.len() => return Err(Error::arg("sample index out of range")),
            Some(i) => data[i * d + coord] += delta,
            None => (0..self.len()).for_each(|i| data[i * d + coord] += delta),
        }
        LabeledDataset::new(Tensor::new(data, vec![self.len(), d])?, self.targets.clone())
    }

    /// CSV with feature columns `x0..x{d-1}` followed by `label` (omitted when
    /// unlabeled). Reals are written in shortest round-trip form.
    pub fn to_csv(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let d = self.input_dim();
        let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        if !matches!(self.targets, Targets::None) {
            header.push("label".into());
        }
        wtr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.input(i).iter().map(|v| v.to_string()).collect();
            match self.label(i) {
                Some(Label::Class(c)) => rec.push(c.to_string()),
                Some(Label::Real(r)) => rec.push(r.to_string()),
                None => {}
            }
            wtr.write_record(&rec)?;
        }
        let bytes = wtr.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Parse CSV written by [`LabeledDataset::to_csv`]. `kind` says how to read
    /// the `label` column.
    pub fn from_csv(text: &str, kind: TargetKind) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr.headers()?.clone();
        let has_label = header.iter().next_back() == Some("label");
        let d = header.len() - usize::from(has_label);
        if has_label == matches!(kind, TargetKind::None) {
            return Err(Error::Parse("label column does not match the requested target kind".into()));
        }
        let mut data = Vec::new();
        let mut raw_labels = Vec::new();
        let mut n = 0;
        for rec in rdr.records() {
            let rec = rec?;
            for j in 0..d {
                data.push(parse_f64(&rec[j])?);
            }
            if has_label {
                raw_labels.push(rec[d].to_string());
            }
            n += 1;
        }
        let inputs = Tensor::new(data, vec![n, d])?;
        let targets = match kind {
            TargetKind::None => Targets::None,
            TargetKind::Reals => Targets::Reals(raw_labels.iter().map(|s| parse_f64(s)).collect::<Result<_>>()?),
            TargetKind::Classes(nc) => {
                let labels: Vec<usize> = raw_labels
                    .iter()
                    .map(|s| s.parse::<usize>().map_err(|e| Error::Parse(format!("label {s:?}: {e}"))))
                    .collect::<Result<_>>()?;
                let num_classes = nc.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
                Targets::Classes { labels, num_classes }
            }
        };
        LabeledDataset::new(inputs, targets)
    }
}

/// How to interpret the `label` column when reading CSV.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    /// Class indices; class count inferred when `None`.
    Classes(Option<usize>),
    Reals,
    None,
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}")))
}

const MOONS_NOISE: f64 = 0.1;
const BLOB_STD: f64 = 0.5;
const BLOB_BOX: f64 = 5.0;
const BLOB_MIN_SEPARATION: f64 = 2.5;

/// Two interleaved half-moons with Gaussian noise (std 0.1). Labels are
/// balanced (`n/2` of each) and sample order is shuffled.
pub fn make_dataset_2d_binary(n: usize, seed: Seed) -> Result<LabeledDataset> {
    if n < 2 {
        return Err(Error::arg("two-moons needs n >= 2"));
    }
    let mut rng = seed.rng();
    let n0 = n / 2;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = usize::from(i >= n0);
        let t: f64 = rng.random::<f64>() * PI;
        let (mut x, mut y) = if class == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        let ex: f64 = StandardNormal.sample(&mut rng);
        let ey: f64 = StandardNormal.sample(&mut rng);
        x += MOONS_NOISE * ex;
        y += MOONS_NOISE * ey;
        rows.push(vec![x, y]);
        labels.push(class);
    }
    let mut order: Vec<usize> = (0..n).collect();
    fisher_yates(&mut order, &mut rng);
    let rows: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
    let labels = order.iter().map(|&i| labels[i]).collect();
    LabeledDataset::classification(&rows, labels, 2)
}

pub(crate) fn fisher_yates<R: Rng>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Deterministic class centers: center `j` depends only on `(seed, j)` and the
/// centers before it, so any prefix of classes is shared across `k`.
pub fn blob_centers(k: usize, d: usize, seed: Seed) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut rng = seed.derive(1_000_000 + j as u64).rng();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..1000 {
            let c: Vec<f64> = (0..d).map(|_| rng.random_range(-BLOB_BOX..BLOB_BOX)).collect();
            let gap = centers
                .iter()
                .map(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            if gap > BLOB_MIN_SEPARATION {
                best = Some((gap, c));
                break;
            }
            if best.as_ref().is_none_or(|(g, _)| gap > *g) {
                best = Some((gap, c));
            }
        }
        centers.push(best.expect("at least one candidate").1);
    }
    centers
}

/// `k` Gaussian blobs (std 0.5) in `d` dimensions, `n / k` samples per class,
/// grouped by class. Sample `i` of class `j` depends only on `(seed, j, i)`, so
/// `make_dataset_kclass(n * k' / k, k', ..)` equals the first `k'` classes of
/// the `k`-class generation.
pub fn make_dataset_kclass(n: usize, k: usize, d: usize, seed: Seed) -> Result<LabeledDataset> {
    if k < 2 || d < 2 {
        return Err(Error::arg("k-class blobs need k >= 2 and d >= 2"));
    }
    let per_class = n / k;
    if per_class == 0 {
        return Err(Error::arg("n must be at least k"));
    }
    let centers = blob_centers(k, d, seed);
    let mut rows = Vec::with_capacity(per_class * k);
    let mut labels = Vec::with_capacity(per_class * k);
    for (j, c) in centers.iter().enumerate() {
        let mut rng = seed.derive(2_000_000 + j as u64).rng();
        for _ in 0..per_class {
            rows.push(
                c.iter()
                    .map(|&m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + BLOB_STD * z
                    })
                    .collect(),
            );
            labels.push(j);
        }
    }
    LabeledDataset::classification(&rows, labels, k)
}

/// Settings of the scalar mean-regression task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    /// Observations per dataset.
    pub n: usize,
    /// Frequency of `phi(theta) = sin(c * asinh(theta))`.
    pub c: f64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig { n: 100, c: 3.0 }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::arg("toy datasets need N >= 1"));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::arg("phi frequency c must be positive"));
        }
        Ok(())
    }
}

/// Sample `mu ~ Unif[-1, 1]` and `N` observations `x_i ~ N(mu, 1)`.
pub fn make_toy_dataset(cfg: &ToyModelConfig, seed: Seed) -> Result<(f64, LabeledDataset)> {
    cfg.validate()?;
    let mut rng = seed.rng();
    let mu = rng.random_range(-1.0..=1.0);
    let xs = (0..cfg.n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            mu + z
        })
        .collect();
    Ok((mu, LabeledDataset::observations(xs)?))
}

/// `phi(theta) = sin(c asinh theta)` and its derivative. Odd, bounded in
/// [-1, 1], with infinitely many preimages of every interior value whose
/// slopes shrink as `|theta|` grows.
pub fn toy_phi(theta: f64, c: f64) -> (f64, f64) {
    let u = c * theta.asinh();
    (u.sin(), c * u.cos() / (1.0 + theta * theta).sqrt())
}

/// Mean squared deviation of the observations from `phi(theta)`.
pub fn toy_loss(theta: f64, data: &LabeledDataset, c: f64) -> f64 {
    let (phi, _) = toy_phi(theta, c);
    let xs = data.scalars();
    xs.iter().map(|x| (x - phi).powi(2)).sum::<f64>() / xs.len() as f64
}

/// Closed-form dataset Fisher of the toy model, `2 N phi'(theta)^2`
/// (squared loss read as the likelihood N(phi, 1/2), summed over samples).
pub fn toy_fisher(theta: f64, n: usize, c: f64) -> f64 {
    let (_, d) = toy_phi(theta, c);
    2.0 * n as f64 * d * d
}

/// All roots of `phi(theta) = m` with `|theta| <= bound`, ascending.
pub fn toy_phi_roots(m: f64, c: f64, bound: f64) -> Vec<f64> {
    if !(-1.0..=1.0).contains(&m) {
        return Vec::new();
    }
    let a = m.asin();
    let umax = c * bound.asinh();
    let mut roots = Vec::new();
    let jmax = (umax / (2.0 * PI)).ceil() as i64 + 1;
    for j in -jmax..=jmax {
        for u in [a + 2.0 * PI * j as f64, PI - a + 2.0 * PI * j as f64] {
            if u.abs() <= umax {
                roots.push((u / c).sinh());
            }
        }
    }
    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    roots
}

/// The toy regressor as a trainable scalar model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub c: f64,
}
