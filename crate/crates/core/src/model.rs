//! Conditional epsilon predictor and its training loop.
//!
//! The predictor ε̂(x_t, t, c) is a small MLP over the concatenation of
//! x_t, fixed sinusoidal features of t/T, and a learned class embedding.
//! The null condition uses the fixed zero embedding, so an untrained class
//! is indistinguishable from null by construction. Training is epsilon
//! matching with random condition dropping, driven by a single seeded RNG
//! stream so runs are bit-reproducible.

use crate::data::LabeledPoint;
use crate::error::{Error, Result};
use crate::net::{AdamState, Mlp, MlpGrads};
use crate::rng::GaussStream;
use crate::schedule::Schedule;

/// Sampling-time condition. `Null` is always valid; class ids must be
/// in range for the model. Positive/negative roles are assigned by the
/// guidance strategy, not by the type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Null,
    Class(usize),
}

/// Number of fixed sinusoidal time features (plus the raw fraction t/T).
pub const TIME_FEATURES: usize = 7;

fn time_features(t: usize, t_max: usize, out: &mut [f64]) {
    let u = t as f64 / t_max as f64;
    out[0] = u;
    let mut k = 1;
    // Half-period frequencies: u = 0 and u = 1 map to distinct features
    // (cos(πu) and cos(3πu) flip sign across the range).
    for f in [1.0, 2.0, 3.0] {
        let arg = std::f64::consts::PI * f * u;
        out[k] = arg.sin();
        out[k + 1] = arg.cos();
        k += 2;
    }
}

/// Trained conditional noise predictor. Immutable after training; safe to
/// share across concurrent sampling chains.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsModel {
    net: Mlp,
    num_classes: usize,
    data_dim: usize,
    embed_dim: usize,
    /// Flat class embedding table, num_classes rows of embed_dim.
    embed: Vec<f64>,
    /// Divisor applied to x_t before it enters the network. Keeps the
    /// first tanh layer in its quasi-linear regime over the data range,
    /// which is what lets conditional predictions extrapolate sanely
    /// off-distribution.
    input_scale: f64,
    t_max: usize,
    schedule_fingerprint: u64,
}

impl EpsModel {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        net: Mlp,
        embed: Vec<f64>,
        embed_dim: usize,
        num_classes: usize,
        data_dim: usize,
        input_scale: f64,
        t_max: usize,
        schedule_fingerprint: u64,
    ) -> Result<Self> {
        if embed.len() != num_classes * embed_dim {
            return Err(Error::ShapeMismatch("embedding table".into()));
        }
        if net.input_dim() != data_dim + TIME_FEATURES + embed_dim
            || net.output_dim() != data_dim
        {
            return Err(Error::ShapeMismatch("network dims".into()));
        }
        if !(input_scale.is_finite() && input_scale > 0.0) {
            return Err(Error::InvalidRange(format!("input scale {input_scale}")));
        }
        if t_max < 2 {
            return Err(Error::InvalidRange(format!("t_max {t_max}")));
        }
        Ok(Self {
            net,
            num_classes,
            data_dim,
            embed_dim,
            embed,
            input_scale,
            t_max,
            schedule_fingerprint,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn embed(&self) -> &[f64] {
        &self.embed
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn schedule_fingerprint(&self) -> u64 {
        self.schedule_fingerprint
    }

    /// Fails when the schedule is not the one the model was trained on.
    pub fn check_schedule(&self, schedule: &Schedule) -> Result<()> {
        if schedule.fingerprint() != self.schedule_fingerprint {
            return Err(Error::FingerprintMismatch);
        }
        Ok(())
    }

    fn check_cond(&self, cond: Condition) -> Result<()> {
        if let Condition::Class(id) = cond {
            if id >= self.num_classes {
                return Err(Error::ClassOutOfRange {
                    id,
                    num_classes: self.num_classes,
                });
            }
        }
        Ok(())
    }

    fn featurize(&self, x_t: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>> {
        if x_t.len() != self.data_dim {
            return Err(Error::ShapeMismatch(format!(
                "point dim {} vs model dim {}",
                x_t.len(),
                self.data_dim
            )));
        }
        if t < 1 || t > self.t_max {
            return Err(Error::StepOutOfRange {
                t,
                t_max: self.t_max,
            });
        }
        self.check_cond(cond)?;
        let mut input = vec![0.0; self.data_dim + TIME_FEATURES + self.embed_dim];
        for (slot, &x) in input.iter_mut().zip(x_t) {
            *slot = x / self.input_scale;
        }
        time_features(t, self.t_max, &mut input[self.data_dim..self.data_dim + TIME_FEATURES]);
        if let Condition::Class(id) = cond {
            let row = &self.embed[id * self.embed_dim..(id + 1) * self.embed_dim];
            input[self.data_dim + TIME_FEATURES..].copy_from_slice(row);
        }
        Ok(input)
    }

    /// Deterministic ε̂_cond(x_t); `Null` yields the unconditional estimate.
    pub fn predict_eps(&self, x_t: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>> {
        let input = self.featurize(x_t, t, cond)?;
        self.net.forward(&input)
    }
}

/// Tweedie denoising: x̂ = (x_t − √(1−ᾱ_t)·ε)/√ᾱ_t.
pub fn posterior_mean(schedule: &Schedule, x_t: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    let ab = schedule.alpha_bar(t)?;
    if t == 0 {
        return Err(Error::StepOutOfRange {
            t,
            t_max: schedule.len(),
        });
    }
    if x_t.len() != eps.len() {
        return Err(Error::ShapeMismatch(format!(
            "x_t dim {} vs eps dim {}",
            x_t.len(),
            eps.len()
        )));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.iter().zip(eps).map(|(x, e)| (x - b * e) / a).collect())
}

/// Epsilon-matching training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub drop_prob: f64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 128,
            lr: 1e-3,
            drop_prob: 0.1,
            hidden: vec![128, 128],
            embed_dim: 8,
            seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidRange(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidRange(format!("learning rate {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::InvalidRange(format!(
                "drop probability {} outside [0,1]",
                self.drop_prob
            )));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidRange(format!("hidden dims {:?}", self.hidden)));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidRange("embed_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch mean epsilon-matching loss.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
}

/// Train the conditional noise predictor by epsilon matching with random
/// condition dropping. Deterministic given the config seed.
pub fn train_epsilon(
    dataset: &[LabeledPoint],
    num_classes: usize,
    schedule: &Schedule,
    cfg: &TrainConfig,
) -> Result<(EpsModel, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let data_dim = dataset[0].x.len();
    for p in dataset {
        if p.x.len() != data_dim {
            return Err(Error::ShapeMismatch("dataset points differ in dim".into()));
        }
        if p.class >= num_classes {
            return Err(Error::ClassOutOfRange {
                id: p.class,
                num_classes,
            });
        }
    }

    let mut rng = GaussStream::new(cfg.seed);
    let mut dims = vec![data_dim + TIME_FEATURES + cfg.embed_dim];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(data_dim);
    let net = Mlp::new(&dims, &mut rng)?;
    // Class rows start at zero: untrained classes predict exactly like null.
    let embed = vec![0.0; num_classes * cfg.embed_dim];
    let data_max = dataset
        .iter()
        .flat_map(|p| p.x.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let input_scale = (data_max / 2.0).max(1.0);
    let mut model = EpsModel::from_parts(
        net,
        embed,
        cfg.embed_dim,
        num_classes,
        data_dim,
        input_scale,
        schedule.len(),
        schedule.fingerprint(),
    )?;

    let n_layers = dims.len() - 1;
    let mut shapes: Vec<usize> = (0..n_layers).map(|l| dims[l] * dims[l + 1]).collect();
    shapes.extend((0..n_layers).map(|l| dims[l + 1]));
    shapes.push(model.embed.len());
    let mut adam = AdamState::new(cfg.lr, &shapes)?;

    let t_count = schedule.len();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report = TrainReport::default();

    // Polyak averaging of the parameters; the averaged weights are what
    // the returned model carries. Stabilizes the learned score far more
    // than the last iterate does.
    const EMA_DECAY: f64 = 0.999;
    let mut ema: Vec<Vec<f64>> = {
        let mut params = model.net.params_mut();
        params.push(&mut model.embed);
        params.iter().map(|p| p.to_vec()).collect()
    };

    for epoch in 0..cfg.epochs {
        // Cosine decay from lr to lr/10 over the run.
        let frac = epoch as f64 / cfg.epochs as f64;
        let lr = cfg.lr * (0.55 + 0.45 * (std::f64::consts::PI * frac).cos());
        adam.set_lr(lr)?;
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut net_grads = MlpGrads::zeros_like(&model.net);
            let mut embed_grads = vec![0.0; model.embed.len()];
            let inv = 1.0 / batch.len() as f64;
            for &idx in batch {
                let point = &dataset[idx];
                let t = 1 + rng.index(t_count);
                let noise = rng.gauss_vec(data_dim);
                let x_t = schedule.forward_sample(&point.x, t, &noise)?;
                let cond = if rng.uniform() < cfg.drop_prob {
                    Condition::Null
                } else {
                    Condition::Class(point.class)
                };
                let input = model.featurize(&x_t, t, cond)?;
                let trace = model.net.forward_trace(&input)?;
                let out = trace.output();
                let mut out_grad = vec![0.0; data_dim];
                for d in 0..data_dim {
                    let r = out[d] - noise[d];
                    loss_sum += r * r;
                    out_grad[d] = 2.0 * r * inv;
                }
                model.net.backward_into(&trace, &out_grad, &mut net_grads)?;
                if let Condition::Class(id) = cond {
                    let base = id * cfg.embed_dim;
                    let tail = &net_grads.input[data_dim + TIME_FEATURES..];
                    for (j, gi) in tail.iter().enumerate() {
                        embed_grads[base + j] += gi;
                    }
                }
            }
            let mut grads: Vec<Vec<f64>> = net_grads.weights;
            grads.extend(net_grads.biases);
            grads.push(embed_grads);
            let mut params = model.net.params_mut();
            params.push(&mut model.embed);
            adam.step(&mut params, &grads)?;
            for (avg, p) in ema.iter_mut().zip(&params) {
                for (a, v) in avg.iter_mut().zip(p.iter()) {
                    *a = EMA_DECAY * *a + (1.0 - EMA_DECAY) * v;
                }
            }
        }
        let mean_loss = loss_sum / dataset.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        report.epoch_loss.push(mean_loss);
    }
    {
        let mut params = model.net.params_mut();
        params.push(&mut model.embed);
        for (p, avg) in params.iter_mut().zip(&ema) {
            p.copy_from_slice(avg);
        }
    }
    Ok((model, report))
}
