//! Flow interpolation paths, timestep samplers, the conditional
//! flow-matching loss, and the training loop.

use rand::Rng;

use crate::data::PatchDataset;
use crate::error::{Error, Result};
use crate::model::{MlpVelocityModel, TapedForward};
use crate::optim::AdamState;
use crate::rng;
use crate::tensor::Tensor;

/// Training-time clamp for sampled timesteps.
pub const T_MIN: f64 = 1e-5;
pub const T_MAX: f64 = 1.0 - 1e-5;

/// Interpolation path between noise (t=0) and data (t=1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowPath {
    /// Straight lines: `x_t = t x1 + (1-t) x0`, target `x1 - x0`.
    RectifiedFlow,
    /// Optimal-transport conditional path with terminal width `sigma_min`:
    /// `x_t = t x1 + (1 - (1-sigma_min) t) x0`, target `x1 - (1-sigma_min) x0`.
    OtCfm { sigma_min: f64 },
}

impl FlowPath {
    pub fn validate(&self) -> Result<()> {
        if let FlowPath::OtCfm { sigma_min } = self {
            if !(0.0..1.0).contains(sigma_min) {
                return Err(Error::Config(format!(
                    "sigma_min must be in [0,1), got {sigma_min}"
                )));
            }
        }
        Ok(())
    }

    pub fn descriptor(&self) -> String {
        match self {
            FlowPath::RectifiedFlow => "rf".to_string(),
            FlowPath::OtCfm { sigma_min } => format!("otcfm(sigma_min={sigma_min})"),
        }
    }

    /// `(x_t, v_target)` for one `(x1, x0, t)` triple.
    pub fn interpolate(&self, x1: &[f64], x0: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        if x1.len() != x0.len() {
            return Err(Error::Shape(format!(
                "x1 has {} elements, x0 has {}",
                x1.len(),
                x0.len()
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("t={t} outside [0,1]")));
        }
        match *self {
            FlowPath::RectifiedFlow => {
                let xt = x1
                    .iter()
                    .zip(x0)
                    .map(|(a, b)| t * a + (1.0 - t) * b)
                    .collect();
                let v = x1.iter().zip(x0).map(|(a, b)| a - b).collect();
                Ok((xt, v))
            }
            FlowPath::OtCfm { sigma_min } => {
                let shrink = 1.0 - (1.0 - sigma_min) * t;
                let xt = x1.iter().zip(x0).map(|(a, b)| t * a + shrink * b).collect();
                let v = x1
                    .iter()
                    .zip(x0)
                    .map(|(a, b)| a - (1.0 - sigma_min) * b)
                    .collect();
                Ok((xt, v))
            }
        }
    }
}

/// Distribution of training timesteps, always clamped to `[T_MIN, T_MAX]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimestepSampler {
    Uniform,
    /// Symmetric exponential with concentration `alpha`: density piles up at
    /// both ends of [0,1] and thins out at the midpoint.
    SymExp { alpha: f64 },
}

impl TimestepSampler {
    pub fn validate(&self) -> Result<()> {
        if let TimestepSampler::SymExp { alpha } = self {
            if !(*alpha > 0.0) {
                return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
            }
        }
        Ok(())
    }

    pub fn descriptor(&self) -> String {
        match self {
            TimestepSampler::Uniform => "uniform".to_string(),
            TimestepSampler::SymExp { alpha } => format!("symexp(alpha={alpha})"),
        }
    }

    /// One draw. SymExp uses an exact inverse-CDF mixture: a truncated
    /// Exponential(alpha) on [0,1] or its mirror, each with probability 1/2.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let raw = match *self {
            TimestepSampler::Uniform => rng.gen::<f64>(),
            TimestepSampler::SymExp { alpha } => {
                let u: f64 = rng.gen();
                let e = -(-u * (-(-alpha).exp_m1())).ln_1p() / alpha;
                if rng.gen::<bool>() {
                    e
                } else {
                    1.0 - e
                }
            }
        };
        T_MIN + (T_MAX - T_MIN) * raw
    }
}

/// Density of the symmetric exponential on [0,1]:
/// `alpha / (2 (1 - e^-alpha)) * (e^{-alpha t} + e^{-alpha (1-t)})`.
pub fn symexp_pdf(t: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t={t} outside [0,1]")));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let z = 2.0 * (1.0 - (-alpha).exp());
    Ok(alpha / z * ((-alpha * t).exp() + (-alpha * (1.0 - t)).exp()))
}

/// CDF of the symmetric exponential on [0,1].
pub fn symexp_cdf(t: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t={t} outside [0,1]")));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let z = 2.0 * (1.0 - (-alpha).exp());
    Ok(((1.0 - (-alpha * t).exp()) + ((-alpha * (1.0 - t)).exp() - (-alpha).exp())) / z)
}

/// Mean conditional flow-matching loss of a model over an explicit batch of
/// `(x1, x0, t)` triples: `mean over batch and dimensions of
/// ||v_target - v(x_t, t)||^2`. Returns the recorded forward pass so the
/// caller can backpropagate.
pub fn cfm_loss_taped(
    model: &MlpVelocityModel,
    batch: &[(&[f64], &[f64], f64)],
    path: FlowPath,
) -> Result<(TapedForward, crate::tape::Var, f64)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let d = model.dim();
    let b = batch.len();
    let mut xts = Vec::with_capacity(b * d);
    let mut targets = Vec::with_capacity(b * d);
    let mut ts = Vec::with_capacity(b);
    for (x1, x0, t) in batch {
        let (xt, v) = path.interpolate(x1, x0, *t)?;
        xts.extend(xt);
        targets.extend(v);
        ts.push(*t);
    }
    let xs = Tensor::from_vec(vec![b, d], xts)?;
    let mut fwd = TapedForward::batch(model, &xs, &ts)?;
    let target_var = fwd.tape.constant(Tensor::from_vec(vec![b, d], targets)?);
    let out = fwd.output();
    let diff = fwd.tape.sub(out, target_var)?;
    let sq = fwd.tape.mul(diff, diff)?;
    let loss = fwd.tape.mean(sq)?;
    let value = fwd.tape.value(loss)[0];
    Ok((fwd, loss, value))
}

/// Loss value only (frozen model, no tape kept).
pub fn cfm_loss(
    model: &MlpVelocityModel,
    batch: &[(&[f64], &[f64], f64)],
    path: FlowPath,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (x1, x0, t) in batch {
        let (xt, target) = path.interpolate(x1, x0, *t)?;
        let pred = model.forward(&xt, *t)?;
        for (p, v) in pred.iter().zip(&target) {
            total += (p - v) * (p - v);
        }
        count += target.len();
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Optimizer steps; 0 is allowed and returns the initialization.
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub path: FlowPath,
    pub sampler: TimestepSampler,
    /// Train/val loss is recorded every `log_interval` steps.
    pub log_interval: u64,
    /// A model snapshot is kept every `checkpoint_interval` steps.
    pub checkpoint_interval: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.log_interval == 0 || self.checkpoint_interval == 0 {
            return Err(Error::Config("intervals must be positive".into()));
        }
        if self.steps % self.log_interval != 0 {
            return Err(Error::Config(format!(
                "log interval {} must divide steps {}",
                self.log_interval, self.steps
            )));
        }
        self.path.validate()?;
        self.sampler.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsRow {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_ms: u64,
}

/// Per-interval training telemetry. `wall_ms` is excluded from any
/// determinism contract.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DynamicsLog {
    pub rows: Vec<DynamicsRow>,
}

impl DynamicsLog {
    /// The log with wall-clock zeroed, for byte-stable comparisons.
    pub fn without_wall_clock(&self) -> DynamicsLog {
        DynamicsLog {
            rows: self
                .rows
                .iter()
                .map(|r| DynamicsRow {
                    wall_ms: 0,
                    ..r.clone()
                })
                .collect(),
        }
    }
}

pub struct TrainOutput {
    pub model: MlpVelocityModel,
    /// `(step, snapshot)` pairs, always including the final step.
    pub checkpoints: Vec<(u64, MlpVelocityModel)>,
    pub log: DynamicsLog,
}

/// Evaluation loss over a full split with one deterministic `(t, x0)` draw
/// per sample.
fn split_loss(
    model: &MlpVelocityModel,
    split: &[Vec<f64>],
    path: FlowPath,
    sampler: TimestepSampler,
    seed: u64,
) -> Result<f64> {
    let d = model.dim();
    let mut total = 0.0;
    for (i, x1) in split.iter().enumerate() {
        let mut r = rng::substream(seed, "train-eval", i as u64);
        let t = sampler.sample(&mut r);
        let x0 = rng::standard_normal_vec(&mut r, d);
        let (xt, target) = path.interpolate(x1, &x0, t)?;
        let pred = model.forward(&xt, t)?;
        for (p, v) in pred.iter().zip(&target) {
            total += (p - v) * (p - v);
        }
    }
    Ok(total / (split.len() * d) as f64)
}

/// Trains on the member split only. Fails fast with a diagnostic if the
/// loss or any parameter goes non-finite.
pub fn train(ds: &PatchDataset, init: MlpVelocityModel, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if init.dim() != ds.dim() {
        return Err(Error::Shape(format!(
            "model dimension {} does not match dataset dimension {}",
            init.dim(),
            ds.dim()
        )));
    }
    let mut model = init;
    model.sampler_desc = cfg.sampler.descriptor();
    let mut opt = AdamState::new(&model, cfg.learning_rate)?;
    let mut log = DynamicsLog::default();
    let mut checkpoints = Vec::new();
    let started = std::time::Instant::now();

    if cfg.steps == 0 {
        checkpoints.push((0, model.clone()));
        return Ok(TrainOutput {
            model,
            checkpoints,
            log,
        });
    }

    let d = ds.dim();
    let mut batch_rng = rng::substream(cfg.seed, "train-batch", 0);
    let mut noise_rng = rng::substream(cfg.seed, "train-noise", 0);
    let mut t_rng = rng::substream(cfg.seed, "train-t", 0);

    for step in 1..=cfg.steps {
        let mut x0s = vec![0.0; cfg.batch_size * d];
        rng::fill_standard_normal(&mut noise_rng, &mut x0s);
        let batch: Vec<(&[f64], &[f64], f64)> = (0..cfg.batch_size)
            .map(|b| {
                let idx = batch_rng.gen_range(0..ds.members.len());
                let t = cfg.sampler.sample(&mut t_rng);
                (
                    ds.members[idx].as_slice(),
                    &x0s[b * d..(b + 1) * d],
                    t,
                )
            })
            .collect();
        let (fwd, loss_var, loss_value) = cfm_loss_taped(&model, &batch, cfg.path)?;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                t: step as f64,
                reason: format!("training loss became non-finite at step {step}"),
            });
        }
        fwd.backward_into(loss_var, &mut model)?;
        opt.step(&mut model)?;

        if step % cfg.log_interval == 0 {
            if !model.all_params_finite() {
                return Err(Error::NonFinite {
                    t: step as f64,
                    reason: format!("non-finite parameter at step {step}"),
                });
            }
            let eval_seed = rng::derive_seed(cfg.seed, "train-eval-root", step);
            let train_loss = split_loss(&model, &ds.members, cfg.path, cfg.sampler, eval_seed)?;
            let val_loss = split_loss(&model, &ds.nonmembers, cfg.path, cfg.sampler, eval_seed)?;
            log.rows.push(DynamicsRow {
                step,
                train_loss,
                val_loss,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
        if step % cfg.checkpoint_interval == 0 || step == cfg.steps {
            if checkpoints.last().map(|(s, _)| *s) != Some(step) {
                checkpoints.push((step, model.clone()));
            }
        }
    }

    Ok(TrainOutput {
        model,
        checkpoints,
        log,
    })
}
