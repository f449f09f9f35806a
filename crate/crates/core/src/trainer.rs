//! Dataset statistics, normalization, and the noise-prediction training loop.

use rand::Rng;

use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng::{derive_seed, fill_standard_normal, seeded, stream};
use crate::schedule::NoiseSchedule;
use crate::scorer::{self, NoisePredictor, ScoreConfig, ScoreMap};
use crate::tensor_store::{DenseTensor, FeatureMap};

/// Half-width used to widen channels whose training values are constant.
pub const DEGENERATE_HALF_WIDTH: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Per-channel min/max mapped onto [-1, 1].
    MinMax,
    /// Per-channel zero mean, unit standard deviation.
    MeanStd,
}

impl NormKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::MinMax => "minmax",
            NormKind::MeanStd => "meanstd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(NormKind::MinMax),
            "meanstd" => Ok(NormKind::MeanStd),
            other => Err(Error::invalid(format!("unknown normalization {other:?}"))),
        }
    }
}

/// Mean and (population) standard deviation of a scalar score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut n = 0usize;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for v in values {
            n += 1;
            let d = v - mean;
            mean += d / n as f64;
            m2 += d * (v - mean);
        }
        if n == 0 {
            return Err(Error::Data("no scores to standardize".into()));
        }
        let std = (m2 / n as f64).sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::Numerical(format!(
                "score standard deviation is {std}; cannot standardize"
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

/// Standardization constants for compounding diffusion and uncertainty scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreStandardization {
    pub diffusion: MeanStd,
    pub uncertainty: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub kind: NormKind,
    pub per_channel_min: Vec<f64>,
    pub per_channel_max: Vec<f64>,
    pub per_channel_mean: Vec<f64>,
    pub per_channel_std: Vec<f64>,
    pub scores: Option<ScoreStandardization>,
}

/// Streaming accumulator of per-channel min, max, mean and variance.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    channels: usize,
    count: u64,
    min: Vec<f64>,
    max: Vec<f64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            count: 0,
            min: vec![f64::INFINITY; channels],
            max: vec![f64::NEG_INFINITY; channels],
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, v: &[f32]) -> Result<()> {
        if v.len() != self.channels {
            return Err(Error::shape(format!(
                "expected {} channels, found {}",
                self.channels,
                v.len()
            )));
        }
        if let Some(c) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::Data(format!("non-finite value in channel {c}")));
        }
        self.count += 1;
        let n = self.count as f64;
        for (c, &x) in v.iter().enumerate() {
            let x = x as f64;
            self.min[c] = self.min[c].min(x);
            self.max[c] = self.max[c].max(x);
            let d = x - self.mean[c];
            self.mean[c] += d / n;
            self.m2[c] += d * (x - self.mean[c]);
        }
        Ok(())
    }

    pub fn push_map(&mut self, map: &FeatureMap) -> Result<()> {
        map.vectors().try_for_each(|v| self.push(v))
    }

    /// Combine with statistics gathered over a disjoint chunk of the data.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.channels != self.channels {
            return Err(Error::shape("merging accumulators of different widths"));
        }
        if other.count == 0 {
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for c in 0..self.channels {
            self.min[c] = self.min[c].min(other.min[c]);
            self.max[c] = self.max[c].max(other.max[c]);
            let d = other.mean[c] - self.mean[c];
            self.mean[c] += d * nb / n;
            self.m2[c] += other.m2[c] + d * d * na * nb / n;
        }
        self.count += other.count;
        Ok(())
    }

    /// Degenerate channels (max == min) are widened by
    /// [`DEGENERATE_HALF_WIDTH`] on each side; zero standard deviations become 1.
    pub fn finish(&self, kind: NormKind) -> Result<DatasetStats> {
        if self.count == 0 {
            return Err(Error::Data("no feature vectors to compute statistics from".into()));
        }
        let mut lo = self.min.clone();
        let mut hi = self.max.clone();
        for c in 0..self.channels {
            if hi[c] <= lo[c] {
                lo[c] -= DEGENERATE_HALF_WIDTH;
                hi[c] += DEGENERATE_HALF_WIDTH;
            }
        }
        let std = self
            .m2
            .iter()
            .map(|m2| {
                let s = (m2 / self.count as f64).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(DatasetStats {
            kind,
            per_channel_min: lo,
            per_channel_max: hi,
            per_channel_mean: self.mean.clone(),
            per_channel_std: std,
            scores: None,
        })
    }
}

/// Exact per-channel statistics over every vector of every map.
pub fn compute_stats<'a>(maps: impl IntoIterator<Item = &'a FeatureMap>, kind: NormKind) -> Result<DatasetStats> {
    let mut acc: Option<StatsAccumulator> = None;
    for m in maps {
        acc.get_or_insert_with(|| StatsAccumulator::new(m.channels()))
            .push_map(m)?;
    }
    acc.ok_or_else(|| Error::Data("empty feature stream".into()))?
        .finish(kind)
}

impl DatasetStats {
    pub fn channels(&self) -> usize {
        self.per_channel_min.len()
    }

    /// Per-channel `(scale, offset)` with `normalized = scale * x + offset`.
    pub fn channel_affine(&self) -> (Vec<f64>, Vec<f64>) {
        match self.kind {
            NormKind::MinMax => self
                .per_channel_min
                .iter()
                .zip(&self.per_channel_max)
                .map(|(&lo, &hi)| {
                    let s = 2.0 / (hi - lo);
                    (s, -lo * s - 1.0)
                })
                .unzip(),
            NormKind::MeanStd => self
                .per_channel_mean
                .iter()
                .zip(&self.per_channel_std)
                .map(|(&m, &s)| (1.0 / s, -m / s))
                .unzip(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if c == 0
            || self.per_channel_max.len() != c
            || self.per_channel_mean.len() != c
            || self.per_channel_std.len() != c
        {
            return Err(Error::Data("inconsistent statistics lengths".into()));
        }
        for i in 0..c {
            if !(self.per_channel_max[i] > self.per_channel_min[i]) || !(self.per_channel_std[i] > 0.0) {
                return Err(Error::Data(format!("degenerate statistics for channel {i}")));
            }
        }
        if let Some(s) = &self.scores {
            let ok = |m: &MeanStd| m.std > 0.0 && m.mean.is_finite();
            if !ok(&s.diffusion) || !s.uncertainty.as_ref().is_none_or(ok) {
                return Err(Error::Data("score standardization needs positive deviations".into()));
            }
        }
        Ok(())
    }

    /// Map raw vectors (row-major `[N, C]`) into the normalized space. Values
    /// outside the training range are not clamped.
    pub fn normalize(&self, x: &[f32]) -> Result<Vec<f32>> {
        let c = self.channels();
        if x.len() % c != 0 {
            return Err(Error::shape(format!(
                "{} values is not a multiple of {c} channels",
                x.len()
            )));
        }
        let (scale, offset) = self.channel_affine();
        Ok(x.iter()
            .enumerate()
            .map(|(i, &v)| (scale[i % c] * v as f64 + offset[i % c]) as f32)
            .collect())
    }

    pub fn denormalize(&self, x: &[f32]) -> Result<Vec<f32>> {
        let c = self.channels();
        if x.len() % c != 0 {
            return Err(Error::shape(format!(
                "{} values is not a multiple of {c} channels",
                x.len()
            )));
        }
        let (scale, offset) = self.channel_affine();
        Ok(x.iter()
            .enumerate()
            .map(|(i, &v)| ((v as f64 - offset[i % c]) / scale[i % c]) as f32)
            .collect())
    }
}

/// Normalized training vectors plus the statistics used to produce them.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    channels: usize,
    vectors: Vec<f32>,
    stats: DatasetStats,
}

impl TrainingSet {
    /// Disassemble maps into vectors and normalize them with statistics
    /// computed over all of them.
    pub fn from_maps(maps: &[FeatureMap], kind: NormKind) -> Result<Self> {
        let stats = compute_stats(maps, kind)?;
        let c = stats.channels();
        let mut raw = Vec::with_capacity(maps.iter().map(|m| m.values().len()).sum());
        for m in maps {
            if m.channels() != c {
                return Err(Error::shape(format!(
                    "feature maps disagree on channel count: {c} vs {}",
                    m.channels()
                )));
            }
            raw.extend_from_slice(m.values());
        }
        let vectors = stats.normalize(&raw)?;
        Ok(Self {
            channels: c,
            vectors,
            stats,
        })
    }

    /// Vectors that are already normalized under `stats`.
    pub fn from_normalized(vectors: Vec<f32>, stats: DatasetStats) -> Result<Self> {
        let channels = stats.channels();
        if vectors.is_empty() || vectors.len() % channels != 0 {
            return Err(Error::Data(format!(
                "training set of {} values does not hold whole {channels}-vectors",
                vectors.len()
            )));
        }
        Ok(Self {
            channels,
            vectors,
            stats,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn stats(&self) -> &DatasetStats {
        &self.stats
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive moment estimation without weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, len: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let c = &self.cfg;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        // fold both bias corrections into the step size and epsilon
        let step = (c.learning_rate * bc2.sqrt() / bc1) as f32;
        let eps = (c.eps * bc2.sqrt()) as f32;
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 70_000,
            batch_size: 4096,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        Ok(())
    }
}

pub struct TrainResult {
    pub params: DenoiserParams<f32>,
    pub stats: DatasetStats,
    pub loss_trace: Vec<f32>,
}

impl TrainResult {
    /// Loss trace as a `[iterations, 1]` column; fails for a zero-iteration run.
    pub fn loss_tensor(&self) -> Result<DenseTensor> {
        DenseTensor::from_f32(vec![self.loss_trace.len(), 1], self.loss_trace.clone())
    }
}

const INIT_STREAM: u64 = u64::MAX;

/// One minibatch: uniform rows with replacement, uniform timesteps, fresh noise.
pub struct Minibatch {
    pub x_t: Vec<f32>,
    pub eps: Vec<f32>,
    pub timesteps: Vec<usize>,
}

pub fn sample_minibatch(set: &TrainingSet, sched: &NoiseSchedule, batch: usize, seed: u64, iteration: u64) -> Minibatch {
    let c = set.channels();
    let mut rng = stream(seed, &[iteration]);
    let rows: Vec<usize> = (0..batch).map(|_| rng.random_range(0..set.len())).collect();
    let timesteps: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=sched.len())).collect();
    let mut eps = vec![0.0f32; batch * c];
    fill_standard_normal(&mut rng, &mut eps);
    let mut x_t = vec![0.0f32; batch * c];
    for (i, (&r, &t)) in rows.iter().zip(&timesteps).enumerate() {
        let span = i * c..(i + 1) * c;
        sched.diffuse_into(&set.vectors[r * c..(r + 1) * c], t, &eps[span.clone()], &mut x_t[span]);
    }
    Minibatch { x_t, eps, timesteps }
}

/// Train a fresh network by minimizing the mean squared error between
/// predicted and true noise. `progress(iteration, loss)` is called after
/// every update.
pub fn train(
    set: &TrainingSet,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    net_cfg: &DenoiserConfig,
    exec: Execution,
    mut progress: impl FnMut(usize, f32),
) -> Result<TrainResult> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if net_cfg.input_dim != set.channels() {
        return Err(Error::shape(format!(
            "network expects C = {}, training data has C = {}",
            net_cfg.input_dim,
            set.channels()
        )));
    }
    let mut params = DenoiserParams::init(net_cfg, &mut seeded(derive_seed(cfg.seed, &[INIT_STREAM])))?;
    let mut adam = Adam::new(cfg.adam, params.values().len());
    let mut loss_trace = Vec::with_capacity(cfg.iterations);
    let denom = (cfg.batch_size * set.channels()) as f64;
    let c = set.channels();
    for it in 0..cfg.iterations {
        let mb = sample_minibatch(set, sched, cfg.batch_size, cfg.seed, it as u64);
        let (loss, grads) = params.value_and_grad(&mb.x_t, &mb.timesteps, exec, |rows, out, d_out| {
            let target = &mb.eps[rows.start * c..rows.end * c];
            let mut acc = 0.0f64;
            for ((d, &o), &e) in d_out.iter_mut().zip(out).zip(target) {
                let diff = o - e;
                acc += (diff as f64) * (diff as f64);
                *d = (2.0 * diff as f64 / denom) as f32;
            }
            acc
        })?;
        let loss = loss / denom;
        if !loss.is_finite() || grads.values.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient at iteration {it} (loss = {loss})"
            )));
        }
        adam.update(params.values_mut(), &grads.values);
        loss_trace.push(loss as f32);
        progress(it, loss as f32);
    }
    Ok(TrainResult {
        params,
        stats: set.stats.clone(),
        loss_trace,
    })
}

/// Score training maps and derive the standardization constants used for
/// compounding. `logits`, when given, must pair with `maps` one to one.
pub fn compute_score_standardization<P: NoisePredictor + ?Sized>(
    maps: &[FeatureMap],
    model: &P,
    sched: &NoiseSchedule,
    score_cfg: &ScoreConfig,
    stats: &DatasetStats,
    logits: Option<&[DenseTensor]>,
    exec: Execution,
) -> Result<ScoreStandardization> {
    if maps.is_empty() {
        return Err(Error::Data("no training maps for score standardization".into()));
    }
    let mut diff = Vec::new();
    for (i, m) in maps.iter().enumerate() {
        let cfg = ScoreConfig {
            noise_seed: derive_seed(score_cfg.noise_seed, &[i as u64]),
            ..score_cfg.clone()
        };
        let map = scorer::score_feature_map(m, model, sched, &cfg, stats, exec)?;
        diff.extend(map.values().iter().map(|&v| v as f64));
    }
    let uncertainty = match logits {
        None => None,
        Some(ls) => {
            if ls.len() != maps.len() {
                return Err(Error::Data(format!(
                    "{} logit tensors for {} maps",
                    ls.len(),
                    maps.len()
                )));
            }
            let mut unc = Vec::new();
            for l in ls {
                let m: ScoreMap = scorer::logsumexp_uncertainty(l)?;
                unc.extend(m.values().iter().map(|&v| v as f64));
            }
            Some(MeanStd::of(unc)?)
        }
    };
    Ok(ScoreStandardization {
        diffusion: MeanStd::of(diff)?,
        uncertainty,
    })
}
