use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{fisher_yates, LabeledDataset};
use crate::ndcore::{Objective, Segment, WeightVector};
use crate::rng::Seed;

/// Training loss above which a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Gradient-noise source of the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum NoiseMode {
    /// Plain minibatch SGD.
    MinibatchOnly,
    /// Full-batch gradient plus `sqrt(2 eta T)` isotropic Gaussian noise per
    /// step (discretized Langevin dynamics). The batch size is ignored.
    ExplicitIsotropic { temperature: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub noise: NoiseMode,
    /// Keep weights every `snapshot_stride` steps; 0 keeps only the initial
    /// and final weights.
    pub snapshot_stride: usize,
    pub seed: Seed,
}

impl TrainConfig {
    /// Plain SGD without momentum, decay or snapshots.
    pub fn sgd(eta: f64, batch_size: usize, steps: usize, seed: Seed) -> Self {
        TrainConfig {
            eta,
            batch_size,
            steps,
            momentum: 0.0,
            weight_decay: 0.0,
            noise: NoiseMode::MinibatchOnly,
            snapshot_stride: 0,
            seed,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::arg(format!("step size {} must be finite and non-negative", self.eta)));
        }
        if self.batch_size < 1 || self.batch_size > n {
            return Err(Error::arg(format!("batch size {} outside [1, {n}]", self.batch_size)));
        }
        if self.steps < 1 {
            return Err(Error::arg("steps must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::arg("weight decay must be non-negative"));
        }
        if let NoiseMode::ExplicitIsotropic { temperature } = self.noise {
            if !(temperature >= 0.0 && temperature.is_finite()) {
                return Err(Error::arg(format!("temperature {temperature} must be non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub weights: Vec<f64>,
}

/// Weights along one training run. Snapshots are ordered by step and the last
/// one always holds the final weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub config: TrainConfig,
    pub layout: Vec<Segment>,
    pub snapshots: Vec<Snapshot>,
    /// Minibatch loss at the weights before each update.
    #[serde(skip)]
    pub losses: Vec<f64>,
}

impl TrainTrace {
    pub fn final_weights(&self) -> WeightVector {
        let w = &self.snapshots.last().expect("trace holds the initial snapshot").weights;
        WeightVector::new(w.clone(), self.layout.clone()).expect("layout matches")
    }

    pub fn snapshot_weights(&self, i: usize) -> WeightVector {
        WeightVector::new(self.snapshots[i].weights.clone(), self.layout.clone()).expect("layout matches")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Runs `w_{k+1} = w_k - eta * grad L_batch(w_k)` with shuffled
/// without-replacement epochs (an incomplete trailing batch is dropped).
/// With `B = N` every step uses the full-data gradient, so the run is plain
/// gradient descent. Deterministic in `cfg.seed`.
pub fn sgd_train<O: Objective + ?Sized>(
    obj: &O,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    w0: &WeightVector,
) -> Result<TrainTrace> {
    let n = data.len();
    cfg.validate(n)?;
    obj.check(data)?;
    let k = obj.dim();
    if w0.dim() != k {
        return Err(Error::Shape { expected: format!("{k} weights"), got: w0.dim().to_string() });
    }
    let mut rng = cfg.seed.rng();
    let mut w = w0.values().to_vec();
    let mut g = vec![0.0; k];
    let mut v = vec![0.0; k];
    let b = cfg.batch_size;
    let (full, noise) = match cfg.noise {
        NoiseMode::MinibatchOnly => (b == n, 0.0),
        NoiseMode::ExplicitIsotropic { temperature } => (true, (2.0 * cfg.eta * temperature).sqrt()),
    };
    let mut perm: Vec<usize> = (0..n).collect();
    let per_epoch = n / b;
    let mut pos = per_epoch;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut snapshots = vec![Snapshot { step: 0, weights: w.clone() }];
    for step in 0..cfg.steps {
        let l = if full {
            obj.loss_grad(&w, data, None, &mut g)?
        } else {
            if pos == per_epoch {
                fisher_yates(&mut perm, &mut rng);
                pos = 0;
            }
            let batch = &perm[pos * b..(pos + 1) * b];
            pos += 1;
            obj.loss_grad(&w, data, Some(batch), &mut g)?
        };
        if !l.is_finite() || l > DIVERGENCE_LOSS {
            return Err(Error::Divergence { step, loss: l });
        }
        losses.push(l);
        if cfg.weight_decay > 0.0 {
            for (gi, wi) in g.iter_mut().zip(&w) {
                *gi += cfg.weight_decay * wi;
            }
        }
        let dir = if cfg.momentum > 0.0 {
            for (vi, gi) in v.iter_mut().zip(&g) {
                *vi = cfg.momentum * *vi + gi;
            }
            &v
        } else {
            &g
        };
        for (wi, di) in w.iter_mut().zip(dir) {
            *wi -= cfg.eta * di;
        }
        if noise > 0.0 {
            for wi in w.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *wi += noise * z;
            }
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
        if cfg.snapshot_stride > 0 && (step + 1) % cfg.snapshot_stride == 0 {
            snapshots.push(Snapshot { step: step + 1, weights: w.clone() });
        }
    }
    if snapshots.last().map(|s| s.step) != Some(cfg.steps) {
        snapshots.push(Snapshot { step: cfg.steps, weights: w });
    }
    Ok(TrainTrace { config: cfg.clone(), layout: w0.layout().to_vec(), snapshots, losses })
}
