use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{eps_to_score, ScoreField};
use crate::error::{check_dim, Error, Result};
use crate::rng::SeedTree;
use crate::schedule::NoiseSchedule;

const MAGIC: &[u8; 8] = b"DDPDENOI";
const FORMAT_VERSION: u32 = 1;

/// Per-sample weight on the noise-prediction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    #[default]
    Uniform,
    /// `beta_t^2 / (alpha_t (1 - alpha_bar_t))`
    Elbo,
}

impl LossWeighting {
    fn weight(self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self {
            LossWeighting::Uniform => 1.0,
            LossWeighting::Elbo => {
                let b = schedule.betas()[t - 1];
                let ab = schedule.alpha_bars()[t];
                b * b / ((1.0 - b) * (1.0 - ab))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub hidden: Vec<usize>,
    pub time_embedding: usize,
    pub class_embedding: usize,
    /// `None` trains an unconditional model.
    pub num_classes: Option<usize>,
    pub condition_dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weighting: LossWeighting,
    /// Fraction of the data kept aside to measure the loss before and after training.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            time_embedding: 16,
            class_embedding: 8,
            num_classes: None,
            condition_dropout: 0.1,
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 100,
            weighting: LossWeighting::Uniform,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be nonzero".into()));
        }
        if self.time_embedding == 0 || self.time_embedding % 2 != 0 {
            return Err(Error::Config("time embedding width must be even and positive".into()));
        }
        if self.num_classes == Some(0) {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.condition_dropout) {
            return Err(Error::Config("condition dropout must lie in [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("learning rate and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub seed: u64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub initial_holdout_loss: f64,
    pub final_holdout_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Network {
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    /// `class_embedding x (num_classes + 1)`; the last column is the null token.
    class_table: Option<DMatrix<f64>>,
}

impl Network {
    fn init<R: Rng + ?Sized>(dim: usize, cfg: &DenoiserConfig, rng: &mut R) -> Self {
        let cond_width = if cfg.num_classes.is_some() { cfg.class_embedding } else { 0 };
        let mut widths = vec![dim + cfg.time_embedding + cond_width];
        widths.extend(&cfg.hidden);
        widths.push(dim);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let scale = (1.0 / pair[0] as f64).sqrt();
            weights.push(DMatrix::from_fn(pair[1], pair[0], |_, _| {
                scale * rng.sample::<f64, _>(StandardNormal)
            }));
            biases.push(DVector::zeros(pair[1]));
        }
        let class_table = cfg.num_classes.map(|k| {
            DMatrix::from_fn(cfg.class_embedding, k + 1, |_, _| rng.sample::<f64, _>(StandardNormal))
        });
        Self {
            weights,
            biases,
            class_table,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: self.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            class_table: self.class_table.as_ref().map(|c| DMatrix::zeros(c.nrows(), c.ncols())),
        }
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        if let Some(c) = &self.class_table {
            out.push(c.as_slice());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        if let Some(c) = &mut self.class_table {
            out.push(c.as_mut_slice());
        }
        out
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn silu_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

/// Sinusoidal embedding of a real step, rescaled so that step ranges of
/// any length map onto `[0, 1000]`.
fn time_embedding(t: f64, max_step: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let tau = t * 1000.0 / max_step as f64;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (tau * freq).sin();
        out[half + i] = (tau * freq).cos();
    }
    out
}

struct Batch {
    inputs: DMatrix<f64>,
    /// class-table column per sample, if conditional
    slots: Vec<usize>,
}

struct Activations {
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
}

/// A small fully connected noise predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedDenoiser {
    dim: usize,
    config: DenoiserConfig,
    net: Network,
    record: TrainingRecord,
    schedule_fingerprint: [u8; 32],
}

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
    config: DenoiserConfig,
    record: TrainingRecord,
    num_params: usize,
}

impl TrainedDenoiser {
    /// Freshly initialized, untrained model.
    pub fn initialize(dim: usize, schedule: &NoiseSchedule, config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::Config("zero-dimensional denoiser".into()));
        }
        let mut rng = SeedTree::new(config.seed).stream("denoiser/init");
        let net = Network::init(dim, &config, &mut rng);
        Ok(Self {
            dim,
            record: TrainingRecord {
                seed: config.seed,
                ..Default::default()
            },
            config,
            net,
            schedule_fingerprint: schedule.fingerprint(),
        })
    }

    /// Trains on `data` with the noise-prediction objective. `labels` must be
    /// given iff the config is conditional.
    pub fn train(
        data: &[Vec<f64>],
        labels: Option<&[usize]>,
        schedule: &NoiseSchedule,
        config: DenoiserConfig,
    ) -> Result<Self> {
        let Some(first) = data.first() else {
            return Err(Error::Input("training data is empty".into()));
        };
        let dim = first.len();
        for x in data {
            check_dim(dim, x.len())?;
        }
        let mut model = Self::initialize(dim, schedule, config)?;
        let cfg = model.config.clone();
        match (cfg.num_classes, labels) {
            (Some(k), Some(l)) => {
                if l.len() != data.len() {
                    return Err(Error::Input("one label per sample required".into()));
                }
                if let Some(&bad) = l.iter().find(|&&c| c >= k) {
                    return Err(Error::UnknownLabel(bad));
                }
            }
            (None, None) => {}
            (Some(_), None) => return Err(Error::Input("conditional training needs labels".into())),
            (None, Some(_)) => return Err(Error::Unconditional),
        }

        let seeds = SeedTree::new(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeds.stream("denoiser/split"));
        let n_hold = ((data.len() as f64 * cfg.holdout_fraction) as usize).min(data.len() - 1);
        let (hold_idx, train_idx) = order.split_at(n_hold);
        let hold_idx = if hold_idx.is_empty() { train_idx } else { hold_idx };

        let mut hold_rng = seeds.stream("denoiser/holdout");
        let holdout = model.draw_batch(data, labels, hold_idx, schedule, 0.0, &mut hold_rng);
        model.record.initial_holdout_loss = model.batch_loss(&holdout, schedule);

        let mut adam = Adam::new(&model.net, cfg.learning_rate);
        let mut rng = seeds.stream("denoiser/train");
        let mut train_idx = train_idx.to_vec();
        for epoch in 0..cfg.epochs {
            train_idx.shuffle(&mut rng);
            let mut total = 0.0;
            let mut count = 0usize;
            for chunk in train_idx.chunks(cfg.batch_size) {
                let batch =
                    model.draw_batch(data, labels, chunk, schedule, cfg.condition_dropout, &mut rng);
                let (loss, grad) = model.loss_and_grad(&batch, schedule);
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                adam.step(&mut model.net, &grad);
                total += loss * chunk.len() as f64;
                count += chunk.len();
            }
            let mean = total / count as f64;
            log::debug!("denoiser epoch {epoch}: loss {mean:.6}");
            model.record.epoch_losses.push(mean);
        }
        model.record.final_holdout_loss = model.batch_loss(&holdout, schedule);
        if !model.record.final_holdout_loss.is_finite() {
            return Err(Error::Diverged {
                epoch: cfg.epochs.saturating_sub(1),
            });
        }
        Ok(model)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn record(&self) -> &TrainingRecord {
        &self.record
    }

    /// Loss on fresh `(x0, t, noise)` draws, for external evaluation.
    pub fn evaluate_loss(
        &self,
        data: &[Vec<f64>],
        labels: Option<&[usize]>,
        schedule: &NoiseSchedule,
        seed: u64,
    ) -> Result<f64> {
        self.check_schedule(schedule)?;
        for x in data {
            check_dim(self.dim, x.len())?;
        }
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut rng = SeedTree::new(seed).stream("denoiser/evaluate");
        let batch = self.draw_batch(data, labels, &idx, schedule, 0.0, &mut rng);
        Ok(self.batch_loss(&batch, schedule))
    }

    fn check_schedule(&self, schedule: &NoiseSchedule) -> Result<()> {
        if schedule.fingerprint() != self.schedule_fingerprint {
            return Err(Error::ScheduleMismatch);
        }
        Ok(())
    }

    fn null_slot(&self) -> usize {
        self.config.num_classes.unwrap_or(0)
    }

    fn input_column(&self, x: &[f64], t: f64, max_step: usize) -> Vec<f64> {
        let mut col = x.to_vec();
        col.extend(time_embedding(t, max_step, self.config.time_embedding));
        if self.net.class_table.is_some() {
            col.extend(std::iter::repeat_n(0.0, self.config.class_embedding));
        }
        col
    }

    // Targets live in the last `dim` rows of a stacked matrix alongside
    // the per-sample step, so one struct carries everything.
    fn draw_batch<R: Rng + ?Sized>(
        &self,
        data: &[Vec<f64>],
        labels: Option<&[usize]>,
        idx: &[usize],
        schedule: &NoiseSchedule,
        dropout: f64,
        rng: &mut R,
    ) -> LossBatch {
        let t_max = schedule.max_step();
        let rows = self.net.weights[0].ncols();
        let mut inputs = DMatrix::zeros(rows, idx.len());
        let mut targets = DMatrix::zeros(self.dim, idx.len());
        let mut weights = Vec::with_capacity(idx.len());
        let mut slots = Vec::with_capacity(idx.len());
        for (j, &i) in idx.iter().enumerate() {
            let t = rng.random_range(1..=t_max);
            let ab = schedule.alpha_bars()[t];
            let noise: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
            let xt: Vec<f64> = data[i]
                .iter()
                .zip(&noise)
                .map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
                .collect();
            let col = self.input_column(&xt, t as f64, t_max);
            inputs.set_column(j, &DVector::from_vec(col));
            targets.set_column(j, &DVector::from_vec(noise));
            weights.push(self.config.weighting.weight(schedule, t));
            let slot = match labels {
                Some(l) if rng.random::<f64>() >= dropout => l[i],
                _ => self.null_slot(),
            };
            slots.push(slot);
        }
        let mut batch = Batch { inputs, slots };
        self.fill_class_rows(&mut batch);
        LossBatch {
            batch,
            targets,
            weights,
        }
    }

    fn fill_class_rows(&self, batch: &mut Batch) {
        if let Some(table) = &self.net.class_table {
            let start = self.dim + self.config.time_embedding;
            for (j, &slot) in batch.slots.iter().enumerate() {
                for r in 0..table.nrows() {
                    batch.inputs[(start + r, j)] = table[(r, slot)];
                }
            }
        }
    }

    fn forward(&self, batch: &Batch) -> Activations {
        let layers = self.net.weights.len();
        let mut pre = Vec::with_capacity(layers);
        let mut post = Vec::with_capacity(layers);
        let mut a = batch.inputs.clone();
        for l in 0..layers {
            let mut z = &self.net.weights[l] * &a;
            for mut col in z.column_iter_mut() {
                col += &self.net.biases[l];
            }
            a = if l + 1 < layers { z.map(silu) } else { z.clone() };
            pre.push(z);
            post.push(a.clone());
        }
        Activations { pre, post }
    }

    fn batch_loss(&self, lb: &LossBatch, _schedule: &NoiseSchedule) -> f64 {
        let acts = self.forward(&lb.batch);
        let out = acts.post.last().unwrap();
        let b = out.ncols() as f64;
        let d = self.dim as f64;
        let mut total = 0.0;
        for j in 0..out.ncols() {
            let sq = (out.column(j) - lb.targets.column(j)).norm_squared();
            total += lb.weights[j] * sq / d;
        }
        total / b
    }

    fn loss_and_grad(&self, lb: &LossBatch, _schedule: &NoiseSchedule) -> (f64, Network) {
        let acts = self.forward(&lb.batch);
        let layers = self.net.weights.len();
        let out = acts.post.last().unwrap();
        let b = out.ncols() as f64;
        let d = self.dim as f64;
        let mut delta = out - &lb.targets;
        let mut loss = 0.0;
        for j in 0..delta.ncols() {
            loss += lb.weights[j] * delta.column(j).norm_squared() / d;
            let scale = 2.0 * lb.weights[j] / (d * b);
            delta.column_mut(j).scale_mut(scale);
        }
        loss /= b;

        let mut grad = self.net.zeros_like();
        for l in (0..layers).rev() {
            let input = if l == 0 { &lb.batch.inputs } else { &acts.post[l - 1] };
            grad.weights[l] = &delta * input.transpose();
            grad.biases[l] = delta.column_sum();
            let back = self.net.weights[l].transpose() * &delta;
            if l > 0 {
                delta = back.zip_map(&acts.pre[l - 1], |g, z| g * silu_grad(z));
            } else if let Some(table_grad) = &mut grad.class_table {
                let start = self.dim + self.config.time_embedding;
                for (j, &slot) in lb.batch.slots.iter().enumerate() {
                    for r in 0..table_grad.nrows() {
                        table_grad[(r, slot)] += back[(start + r, j)];
                    }
                }
            }
        }
        (loss, grad)
    }

    /// Writes the versioned binary model file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            dim: self.dim,
            config: self.config.clone(),
            record: self.record.clone(),
            num_params: self.net.num_params(),
        })?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.schedule_fingerprint)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for tensor in self.net.tensors() {
            for v in tensor {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Loads a model file, rejecting it unless it was trained on `schedule`.
    pub fn load(path: &Path, schedule: &NoiseSchedule) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file, schedule)
    }

    pub fn read_from<R: Read>(r: &mut R, schedule: &NoiseSchedule) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a denoiser file".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported denoiser format version {version}")));
        }
        let mut fingerprint = [0u8; 32];
        r.read_exact(&mut fingerprint)?;
        if fingerprint != schedule.fingerprint() {
            return Err(Error::ScheduleMismatch);
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let len = u64::from_le_bytes(u64buf) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        header.config.validate()?;
        let mut model = Self::initialize(header.dim, schedule, header.config)?;
        if model.net.num_params() != header.num_params {
            return Err(Error::Format("parameter count does not match architecture".into()));
        }
        for tensor in model.net.tensors_mut() {
            for v in tensor.iter_mut() {
                r.read_exact(&mut u64buf)?;
                *v = f64::from_le_bytes(u64buf);
            }
        }
        model.record = header.record;
        Ok(model)
    }
}

struct LossBatch {
    batch: Batch,
    targets: DMatrix<f64>,
    weights: Vec<f64>,
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Network,
    v: Network,
}

impl Adam {
    fn new(net: &Network, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: net.zeros_like(),
            v: net.zeros_like(),
        }
    }

    fn step(&mut self, net: &mut Network, grad: &Network) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let params = net.tensors_mut();
        let grads = grad.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

impl ScoreField for TrainedDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn is_conditional(&self) -> bool {
        self.config.num_classes.is_some()
    }

    fn eps(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: f64,
        condition: Option<usize>,
    ) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        self.check_schedule(schedule)?;
        let t_max = schedule.max_step() as f64;
        if !(0.0..=t_max).contains(&t) {
            return Err(Error::StepOutOfRange {
                step: t,
                lo: 0.0,
                hi: t_max,
            });
        }
        let slot = match (condition, self.config.num_classes) {
            (None, _) => self.null_slot(),
            (Some(_), None) => return Err(Error::Unconditional),
            (Some(c), Some(k)) if c >= k => return Err(Error::UnknownLabel(c)),
            (Some(c), Some(_)) => c,
        };
        let col = self.input_column(x, t, schedule.max_step());
        let mut batch = Batch {
            inputs: DMatrix::from_vec(col.len(), 1, col),
            slots: vec![slot],
        };
        self.fill_class_rows(&mut batch);
        let acts = self.forward(&batch);
        Ok(acts.post.last().unwrap().column(0).iter().copied().collect())
    }

    /// The network only sees steps `1..=T` in training, so the score below
    /// step 1 is taken from step 1.
    fn score(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: f64,
        condition: Option<usize>,
    ) -> Result<Vec<f64>> {
        let t = t.max(1.0);
        let eps = self.eps(schedule, x, t, condition)?;
        eps_to_score(&eps, t, schedule)
    }
}
