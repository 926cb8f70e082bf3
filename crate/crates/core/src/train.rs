//! Training configuration, AdamW, the epoch loop, checkpoints and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{
    evaluate_predictions, DataShape, FmsModel, LossValues, Mode, ModelConfig, Prediction,
};
use crate::nn::ParamStore;
use crate::numeric::{Array, Tape};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const SEED_ENV: &str = "FMS_SEED";

/// Learning-rate shape over the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// half-cosine decay from the base rate to zero at the last step
    Cosine,
}

impl Schedule {
    /// Multiplier on the base rate after `done` of `total` steps.
    pub fn factor(self, done: u64, total: u64) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine if total == 0 => 1.0,
            Schedule::Cosine => {
                0.5 * (1.0 + (std::f64::consts::PI * done.min(total) as f64 / total as f64).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    /// per-epoch loss log (JSON lines); omitted when empty
    pub loss_log: Option<PathBuf>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            schedule: Schedule::Constant,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            dataset: PathBuf::from("train.jsonl"),
            checkpoint: PathBuf::from("checkpoint.json"),
            loss_log: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("eps", self.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        self.model.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.dataset);
        fix(&mut cfg.checkpoint);
        if let Some(p) = cfg.loss_log.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    /// Apply `FMS_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Some(seed) = env_seed()? {
            self.seed = seed;
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Seed from `FMS_SEED`, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

impl AdamState {
    pub fn zeros(store: &ParamStore) -> Self {
        let z: Vec<Array> = store
            .values()
            .iter()
            .map(|a| Array::zeros(a.shape()))
            .collect();
        Self {
            step: 0,
            m: z.clone(),
            v: z,
        }
    }
}

/// One AdamW update: decay applied directly to the weights, then the
/// bias-corrected moment step.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Array],
    state: &mut AdamState,
    hp: &AdamW,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::invalid(
            "gradient or optimizer state does not match parameters",
        ));
    }
    for (id, g) in store.ids().zip(grads) {
        if g.shape() != store.get(id).shape() {
            return Err(Error::shape("adamw_step", g.shape(), store.get(id).shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - hp.lr * hp.weight_decay;
    for (i, w) in store.values_mut().iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (k, (x, &gk)) in w.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * gk;
            v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            *x = *x * decay - hp.lr * mh / (vh.sqrt() + hp.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub step: u64,
    pub epochs_done: usize,
    /// shuffle order of epoch `e` is derived from `(seed, e)`
    pub seed: u64,
    pub shape: DataShape,
    pub model: ModelConfig,
    pub params: ParamStore,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.schema_version != CHECKPOINT_VERSION {
            return Err(Error::SchemaVersion {
                expected: CHECKPOINT_VERSION,
                found: ck.schema_version,
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_json()?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Rebuild the model and load the stored parameters into it.
    pub fn restore(&self) -> Result<(FmsModel, ParamStore)> {
        let (model, mut store) = FmsModel::new(self.model.clone(), self.shape, self.seed)?;
        store.load_from(&self.params)?;
        Ok((model, store))
    }
}

/// Mean loss components over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub losses: LossValues,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample order of epoch `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
        seed,
        epoch as u64 + 1,
    )));
    idx
}

pub(crate) fn accumulate(acc: &mut LossValues, v: &LossValues, w: f64) {
    let mut a = serde_json::to_value(&*acc).expect("loss values serialize");
    let b = serde_json::to_value(v).expect("loss values serialize");
    for (k, x) in a.as_object_mut().expect("struct").iter_mut() {
        let y = b[k.as_str()].as_f64().unwrap_or(0.0);
        *x = serde_json::json!(x.as_f64().unwrap_or(0.0) + w * y);
    }
    *acc = serde_json::from_value(a).expect("loss values deserialize");
}

/// A fresh model and its untrained checkpoint.
pub fn initialize(cfg: &TrainConfig, shape: DataShape) -> Result<(FmsModel, Checkpoint)> {
    let (model, params) = FmsModel::new(cfg.model.clone(), shape, cfg.seed)?;
    let ck = Checkpoint {
        schema_version: CHECKPOINT_VERSION,
        step: 0,
        epochs_done: 0,
        seed: cfg.seed,
        shape,
        model: cfg.model.clone(),
        optimizer: AdamState::zeros(&params),
        params,
    };
    Ok((model, ck))
}

/// One optimizer step on `batch`; returns the loss values before the update.
pub fn train_step(
    model: &FmsModel,
    store: &mut ParamStore,
    state: &mut AdamState,
    hp: &AdamW,
    batch: &[&Sample],
) -> Result<LossValues> {
    let tape = Tape::new();
    let p = store.bind(&tape);
    let out = model.forward(&p, batch, Mode::Train)?;
    let values = out.losses.values.clone();
    if !values.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let mut grads = tape.backward(out.losses.total)?;
    let g = p.grads(&mut grads);
    drop(tape);
    adamw_step(store, &g, state, hp)?;
    Ok(values)
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Train for `cfg.epochs` epochs from `start`. `on_epoch` sees each finished
/// epoch's log and checkpoint, e.g. to persist them; a non-finite loss aborts
/// with the error while the last checkpoint handed out stays valid.
pub fn train_from(
    cfg: &TrainConfig,
    data: &Dataset,
    start: Checkpoint,
    mut on_epoch: impl FnMut(&EpochLog, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let shape = DataShape::from(&data.config);
    if shape != start.shape {
        return Err(Error::Config(format!(
            "dataset shape {shape:?} differs from model shape {:?}",
            start.shape
        )));
    }
    if data.samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let (model, mut store) = start.restore()?;
    let mut state = start.optimizer.clone();
    let base = cfg.adamw();
    let mut ck = start;
    let mut log = Vec::new();
    let per_epoch = data.samples.len().div_ceil(cfg.batch_size) as u64;
    let horizon = (ck.epochs_done + cfg.epochs) as u64 * per_epoch;
    for epoch in ck.epochs_done..ck.epochs_done + cfg.epochs {
        let order = epoch_order(data.samples.len(), ck.seed, epoch);
        let mut sums = LossValues::default();
        let mut steps = 0u64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let done = epoch as u64 * per_epoch + steps;
            let hp = AdamW {
                lr: base.lr * cfg.schedule.factor(done, horizon),
                ..base
            };
            let v =
                train_step(&model, &mut store, &mut state, &hp, &batch).map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!(
                        "{what} at epoch {epoch}, step {}",
                        state.step + 1
                    )),
                    e => e,
                })?;
            accumulate(&mut sums, &v, 1.0);
            steps += 1;
        }
        let mut mean = LossValues::default();
        accumulate(&mut mean, &sums, 1.0 / steps as f64);
        ck = Checkpoint {
            step: state.step,
            epochs_done: epoch + 1,
            params: store.clone(),
            optimizer: state.clone(),
            ..ck
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            steps,
            losses: mean,
        };
        log::info!("epoch {} total {:.4}", entry.epoch, entry.losses.total);
        on_epoch(&entry, &ck)?;
        log.push(entry);
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        log,
    })
}

pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let (_, start) = initialize(cfg, DataShape::from(&data.config))?;
    train_from(cfg, data, start, |_, _| Ok(()))
}

/// Train and persist: the checkpoint is rewritten after every epoch and each
/// epoch appends one line to the loss log.
pub fn train_to_disk(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let (_, start) = initialize(cfg, DataShape::from(&data.config))?;
    start.save(&cfg.checkpoint)?;
    let mut log_file = match &cfg.loss_log {
        Some(p) => Some(fs::File::create(p)?),
        None => None,
    };
    train_from(cfg, data, start, |entry, ck| {
        ck.save(&cfg.checkpoint)?;
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, entry)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub struct EvalOutcome {
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
    /// loss components averaged over evaluation batches (inference culling)
    pub losses: LossValues,
}

pub const EVAL_BATCH: usize = 64;

pub fn evaluate_model(
    model: &FmsModel,
    store: &ParamStore,
    samples: &[Sample],
) -> Result<EvalOutcome> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut predictions = Vec::with_capacity(samples.len());
    let mut sums = LossValues::default();
    let mut batches = 0usize;
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let (p, v) = model.predict(store, &batch, Mode::Infer)?;
        predictions.extend(p);
        accumulate(&mut sums, &v, 1.0);
        batches += 1;
    }
    let mut losses = LossValues::default();
    accumulate(&mut losses, &sums, 1.0 / batches as f64);
    let labels: Vec<_> = samples.iter().map(|s| &s.labels).collect();
    let report = evaluate_predictions(&predictions, &labels, false)?;
    Ok(EvalOutcome {
        report,
        predictions,
        losses,
    })
}

pub fn evaluate(ck: &Checkpoint, data: &Dataset) -> Result<EvalOutcome> {
    let shape = DataShape::from(&data.config);
    if shape != ck.shape {
        return Err(Error::Config(format!(
            "dataset shape {shape:?} differs from checkpoint shape {:?}",
            ck.shape
        )));
    }
    let (model, store) = ck.restore()?;
    evaluate_model(&model, &store, &data.samples)
}
