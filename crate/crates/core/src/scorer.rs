//! Inference-time OoD scores.
//!
//! Per feature vector and timestep `t`: perturb `x0` to `x_t` with fresh
//! noise, predict the noise, and compare. The directional score is the
//! negative cosine between prediction and true noise; maps for several
//! timesteps are summed with weights `sqrt(1 - alpha_bar_t)`.

use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::exec::{self, Execution, CHUNK_ROWS};
use crate::rng::{fill_standard_normal, stream};
use crate::schedule::NoiseSchedule;
use crate::tensor_store::{DenseTensor, FeatureMap};
use crate::trainer::{DatasetStats, ScoreStandardization};

/// Norms below this make the directional score degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

const RECON_STREAM: u64 = 0x7265_636f_6e00_0000;

/// Anything that predicts the noise in normalized feature space.
pub trait NoisePredictor: Sync {
    fn input_dim(&self) -> usize;

    /// Row-major `[N, C]` perturbed vectors in, `[N, C]` predicted noise out.
    fn predict(&self, x_t: &[f32], timesteps: &[usize], exec: Execution) -> Result<Vec<f32>>;

    /// True when the predictor is known to output zero everywhere.
    fn is_trivial(&self) -> bool {
        false
    }
}

impl NoisePredictor for DenoiserParams<f32> {
    fn input_dim(&self) -> usize {
        self.config().input_dim
    }

    fn predict(&self, x_t: &[f32], timesteps: &[usize], exec: Execution) -> Result<Vec<f32>> {
        self.forward_batch(x_t, timesteps, exec)
    }

    fn is_trivial(&self) -> bool {
        self.output_is_zero()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Directional,
    MseScore,
    MseRecon,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Directional => "directional",
            ScoreKind::MseScore => "mse-score",
            ScoreKind::MseRecon => "mse-recon",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "directional" => Ok(ScoreKind::Directional),
            "mse-score" => Ok(ScoreKind::MseScore),
            "mse-recon" => Ok(ScoreKind::MseRecon),
            other => Err(Error::invalid(format!(
                "unknown score kind {other:?} (directional|mse-score|mse-recon)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreConfig {
    pub timesteps: Vec<usize>,
    pub kind: ScoreKind,
    pub noise_seed: u64,
    pub samples_per_timestep: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            timesteps: (1..=25).collect(),
            kind: ScoreKind::Directional,
            noise_seed: 0,
            samples_per_timestep: 1,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.timesteps.is_empty() {
            return Err(Error::invalid("at least one timestep is required"));
        }
        for &t in &self.timesteps {
            sched.check(t)?;
        }
        if self.samples_per_timestep == 0 {
            return Err(Error::invalid("samples_per_timestep must be >= 1"));
        }
        if self.kind != ScoreKind::Directional && self.timesteps.len() != 1 {
            return Err(Error::invalid(format!(
                "{} is defined for a single timestep; got {}",
                self.kind.as_str(),
                self.timesteps.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Patch,
    Pixel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
    resolution: Resolution,
    /// Vectors whose directional score hit a zero norm and was set to 0.
    pub degenerate: usize,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>, resolution: Resolution) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::shape(format!(
                "score map {height}x{width} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite value in score map".into()));
        }
        Ok(Self {
            height,
            width,
            values,
            resolution,
            degenerate: 0,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor::from_f32(vec![self.height, self.width], self.values.clone())
            .expect("score map dimensions validated on construction")
    }

    pub fn from_tensor(t: &DenseTensor, resolution: Resolution) -> Result<Self> {
        match t.shape() {
            [h, w] | [h, w, 1] => Self::new(*h, *w, t.as_f32()?.to_vec(), resolution),
            other => Err(Error::shape(format!("score map must be [H, W], got {other:?}"))),
        }
    }

    /// 8-bit grayscale rendering with min -> 0 and max -> 255.
    pub fn heatmap(&self) -> DenseTensor {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = hi - lo;
        let px = self
            .values
            .iter()
            .map(|&v| {
                if span > 0.0 {
                    ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            })
            .collect();
        DenseTensor::from_u8(vec![self.height, self.width], px).expect("validated dims")
    }
}

/// `-<eps_hat, eps> / (|eps_hat| |eps|)`. Returns `(0, true)` when either
/// norm is below [`DEGENERATE_NORM`].
pub fn directional_score(eps_hat: &[f32], eps: &[f32]) -> Result<(f32, bool)> {
    if eps_hat.len() != eps.len() {
        return Err(Error::shape("directional score of vectors with different lengths"));
    }
    Ok(cosine_score(eps_hat, eps))
}

fn cosine_score(eps_hat: &[f32], eps: &[f32]) -> (f32, bool) {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in eps_hat.iter().zip(eps) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return (0.0, true);
    }
    ((-dot / (na * nb)).clamp(-1.0, 1.0) as f32, false)
}

/// Mean over channels of the squared difference.
pub fn mse_score(eps_hat: &[f32], eps: &[f32]) -> Result<f32> {
    if eps_hat.len() != eps.len() || eps.is_empty() {
        return Err(Error::shape("mse of vectors with different or zero lengths"));
    }
    Ok(mse(eps_hat, eps))
}

fn mse(a: &[f32], b: &[f32]) -> f32 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    (s / a.len() as f64) as f32
}

/// Reconstruction error after perturbing to `t` and running `t` ancestral
/// reverse steps, batched over rows of `x0`. Draws the perturbation first,
/// then one noise buffer per stochastic reverse step, from `rng`.
pub fn recon_scores<P: NoisePredictor + ?Sized, R: rand::Rng + ?Sized>(
    model: &P,
    x0: &[f32],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
    exec: Execution,
) -> Result<Vec<f32>> {
    sched.check(t)?;
    let c = model.input_dim();
    if x0.is_empty() || x0.len() % c != 0 {
        return Err(Error::shape(format!("input is not a whole number of {c}-vectors")));
    }
    let mut eps = vec![0.0f32; x0.len()];
    fill_standard_normal(rng, &mut eps);
    let noises: Vec<Vec<f32>> = (2..=t)
        .rev()
        .map(|_| {
            let mut z = vec![0.0f32; x0.len()];
            fill_standard_normal(rng, &mut z);
            z
        })
        .collect();
    let x = reconstruct(model, x0, t, sched, &eps, &noises, exec)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite reconstruction".into()));
    }
    Ok(recon_errors(x0, &x, c))
}

/// Single-vector form of [`recon_scores`].
pub fn recon_score<P: NoisePredictor + ?Sized, R: rand::Rng + ?Sized>(
    model: &P,
    x0: &[f32],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f32> {
    if x0.len() != model.input_dim() {
        return Err(Error::shape("recon_score takes exactly one vector"));
    }
    Ok(recon_scores(model, x0, t, sched, rng, Execution::Sequential)?[0])
}

/// Perturbs `x0` to step `t` with `eps`, then runs DDPM ancestral sampling
/// back to an estimate of `x0`. `noises[k]` is used at step `t - k` for steps
/// above 1; the last step is noiseless. The chain state is kept in f64 and
/// only the model input is rounded, so the small reverse updates are not lost
/// to cancellation.
fn reconstruct<P: NoisePredictor + ?Sized>(
    model: &P,
    x0: &[f32],
    t: usize,
    sched: &NoiseSchedule,
    eps: &[f32],
    noises: &[Vec<f32>],
    exec: Execution,
) -> Result<Vec<f64>> {
    let n = x0.len() / model.input_dim();
    let (a, sigma) = (sched.alpha_bar(t).sqrt(), sched.sigma(t));
    let mut x: Vec<f64> = x0.iter().zip(eps).map(|(&v, &e)| a * v as f64 + sigma * e as f64).collect();
    let mut input = vec![0.0f32; x.len()];
    for (k, s) in (1..=t).rev().enumerate() {
        for (i, &v) in input.iter_mut().zip(&x) {
            *i = v as f32;
        }
        let eps_hat = model.predict(&input, &vec![s; n], exec)?;
        let coef = sched.beta(s) / sched.sigma(s);
        let inv_sqrt_alpha = 1.0 / sched.alpha(s).sqrt();
        let post_std = sched.posterior_variance(s).sqrt();
        for (i, (xv, &e)) in x.iter_mut().zip(&eps_hat).enumerate() {
            let mean = (*xv - coef * e as f64) * inv_sqrt_alpha;
            *xv = if s > 1 { mean + post_std * noises[k][i] as f64 } else { mean };
        }
    }
    Ok(x)
}

fn recon_errors(x0: &[f32], x: &[f64], c: usize) -> Vec<f32> {
    x0.chunks_exact(c)
        .zip(x.chunks_exact(c))
        .map(|(a, b)| {
            let s: f64 = a.iter().zip(b).map(|(&u, &v)| (u as f64 - v).powi(2)).sum();
            (s / c as f64) as f32
        })
        .collect()
}

fn diffuse_rows(sched: &NoiseSchedule, x0: &[f32], t: usize, eps: &[f32], out: &mut [f32], c: usize) {
    for ((xr, er), or) in x0.chunks_exact(c).zip(eps.chunks_exact(c)).zip(out.chunks_exact_mut(c)) {
        sched.diffuse_into(xr, t, er, or);
    }
}

/// Per-vector scores of normalized rows `x0` at one timestep, averaged over
/// `samples` noise draws. Noise for sample `s` comes from the stream
/// `(seed, t, s)`, so the same timestep sees the same noise whatever else is
/// being scored.
pub fn timestep_scores<P: NoisePredictor + ?Sized>(
    model: &P,
    x0: &[f32],
    t: usize,
    kind: ScoreKind,
    sched: &NoiseSchedule,
    seed: u64,
    samples: usize,
    exec: Execution,
) -> Result<(Vec<f32>, usize)> {
    sched.check(t)?;
    let c = model.input_dim();
    if x0.len() % c != 0 {
        return Err(Error::shape(format!("input is not a whole number of {c}-vectors")));
    }
    let n = x0.len() / c;
    let mut acc = vec![0.0f64; n];
    let mut degenerate = 0;
    for s in 0..samples.max(1) {
        let mut rng = stream(seed, &[t as u64, s as u64]);
        let per_row: Vec<f32> = if kind == ScoreKind::MseRecon {
            let mut rrng = stream(seed, &[RECON_STREAM, t as u64, s as u64]);
            let mut eps = vec![0.0f32; x0.len()];
            fill_standard_normal(&mut rng, &mut eps);
            let noises: Vec<Vec<f32>> = (2..=t)
                .rev()
                .map(|_| {
                    let mut z = vec![0.0f32; x0.len()];
                    fill_standard_normal(&mut rrng, &mut z);
                    z
                })
                .collect();
            let x = reconstruct(model, x0, t, sched, &eps, &noises, exec)?;
            recon_errors(x0, &x, c)
        } else {
            let mut eps = vec![0.0f32; x0.len()];
            fill_standard_normal(&mut rng, &mut eps);
            let mut x = vec![0.0f32; x0.len()];
            diffuse_rows(sched, x0, t, &eps, &mut x, c);
            let eps_hat = model.predict(&x, &vec![t; n], exec)?;
            let rows = exec::map_chunks(exec, n, CHUNK_ROWS * 16, |r| {
                r.map(|i| {
                    let span = i * c..(i + 1) * c;
                    match kind {
                        ScoreKind::Directional => cosine_score(&eps_hat[span.clone()], &eps[span]),
                        _ => (mse(&eps_hat[span.clone()], &eps[span]), false),
                    }
                })
                .collect::<Vec<_>>()
            });
            rows.into_iter()
                .flatten()
                .map(|(v, d)| {
                    degenerate += d as usize;
                    v
                })
                .collect()
        };
        for (a, v) in acc.iter_mut().zip(per_row) {
            *a += v as f64;
        }
    }
    let k = samples.max(1) as f64;
    let out: Vec<f32> = acc.into_iter().map(|v| (v / k) as f32).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite score at timestep {t}")));
    }
    Ok((out, degenerate))
}

/// Weight of timestep `t` in the aggregated directional score.
pub fn timestep_weight(sched: &NoiseSchedule, t: usize) -> f64 {
    sched.sigma(t)
}

/// `sum_t sqrt(1 - alpha_bar_t) * maps[t]`, summed in the given order.
pub fn aggregate(per_timestep: &[(usize, Vec<f32>)], sched: &NoiseSchedule) -> Result<Vec<f32>> {
    let n = per_timestep
        .first()
        .map(|(_, v)| v.len())
        .ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    let mut acc = vec![0.0f64; n];
    for (t, v) in per_timestep {
        if v.len() != n {
            return Err(Error::shape("per-timestep maps differ in size"));
        }
        let w = timestep_weight(sched, *t);
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += w * x as f64;
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

fn check_map<P: NoisePredictor + ?Sized>(fmap: &FeatureMap, model: &P, stats: &DatasetStats) -> Result<()> {
    if fmap.channels() != model.input_dim() || stats.channels() != model.input_dim() {
        return Err(Error::shape(format!(
            "channel mismatch: model expects C = {}, feature map has C = {}",
            model.input_dim(),
            fmap.channels()
        )));
    }
    if model.is_trivial() {
        return Err(Error::Data(
            "denoiser outputs zero everywhere (untrained checkpoint?)".into(),
        ));
    }
    Ok(())
}

/// One patch-resolution map per timestep in `cfg.timesteps`, unweighted.
pub fn timestep_maps<P: NoisePredictor + ?Sized>(
    fmap: &FeatureMap,
    model: &P,
    sched: &NoiseSchedule,
    cfg: &ScoreConfig,
    stats: &DatasetStats,
    exec: Execution,
) -> Result<Vec<(usize, ScoreMap)>> {
    for &t in &cfg.timesteps {
        sched.check(t)?;
    }
    check_map(fmap, model, stats)?;
    let x0 = stats.normalize(fmap.values())?;
    cfg.timesteps
        .iter()
        .map(|&t| {
            let (v, degenerate) = timestep_scores(
                model,
                &x0,
                t,
                cfg.kind,
                sched,
                cfg.noise_seed,
                cfg.samples_per_timestep,
                exec,
            )?;
            let mut map = ScoreMap::new(fmap.height(), fmap.width(), v, Resolution::Patch)?;
            map.degenerate = degenerate;
            Ok((t, map))
        })
        .collect()
}

/// Patch-resolution OoD score map. Directional scores are aggregated over
/// all configured timesteps; the baseline kinds use their single timestep.
pub fn score_feature_map<P: NoisePredictor + ?Sized>(
    fmap: &FeatureMap,
    model: &P,
    sched: &NoiseSchedule,
    cfg: &ScoreConfig,
    stats: &DatasetStats,
    exec: Execution,
) -> Result<ScoreMap> {
    cfg.validate(sched)?;
    let maps = timestep_maps(fmap, model, sched, cfg, stats, exec)?;
    if cfg.kind != ScoreKind::Directional {
        return Ok(maps.into_iter().next().expect("validated single timestep").1);
    }
    let degenerate = maps.iter().map(|(_, m)| m.degenerate).sum();
    let per_t: Vec<(usize, Vec<f32>)> = maps.into_iter().map(|(t, m)| (t, m.values)).collect();
    let mut map = ScoreMap::new(fmap.height(), fmap.width(), aggregate(&per_t, sched)?, Resolution::Patch)?;
    map.degenerate = degenerate;
    Ok(map)
}

/// Bilinear resize with half-pixel centers (corner alignment off).
pub fn upsample_scores(map: &ScoreMap, target_h: usize, target_w: usize) -> Result<ScoreMap> {
    if target_h < map.height || target_w < map.width {
        return Err(Error::invalid(format!(
            "cannot upsample {}x{} to smaller {target_h}x{target_w}",
            map.height, map.width
        )));
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(target_h, map.height);
    let xs = axis(target_w, map.width);
    let v = |r: usize, c: usize| map.values[r * map.width + c] as f64;
    let mut out = Vec::with_capacity(target_h * target_w);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            let top = v(y0, x0) * (1.0 - wx) + v(y0, x1) * wx;
            let bot = v(y1, x0) * (1.0 - wx) + v(y1, x1) * wx;
            out.push((top * (1.0 - wy) + bot * wy) as f32);
        }
    }
    let mut up = ScoreMap::new(target_h, target_w, out, Resolution::Pixel)?;
    up.degenerate = map.degenerate;
    Ok(up)
}

/// Negative log-sum-exp of `[H, W, K]` logits per pixel.
pub fn logsumexp_uncertainty(logits: &DenseTensor) -> Result<ScoreMap> {
    let (h, w, k) = match logits.shape() {
        [h, w, k] => (*h, *w, *k),
        other => return Err(Error::shape(format!("logits must be [H, W, K], got {other:?}"))),
    };
    if k < 2 {
        return Err(Error::invalid("logits need at least two classes"));
    }
    let data = logits.as_f32()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    let values = data
        .chunks_exact(k)
        .map(|row| {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
            let s: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
            (-(m + s.ln())) as f32
        })
        .collect();
    ScoreMap::new(h, w, values, Resolution::Patch)
}

/// `0.5 * (standardized diffusion + standardized uncertainty)`.
pub fn compound(diff: &ScoreMap, unc: &ScoreMap, std: &ScoreStandardization) -> Result<ScoreMap> {
    if diff.height != unc.height || diff.width != unc.width {
        return Err(Error::shape(format!(
            "diffusion map {}x{} vs uncertainty map {}x{}",
            diff.height, diff.width, unc.height, unc.width
        )));
    }
    let u = std
        .uncertainty
        .ok_or_else(|| Error::Data("no uncertainty standardization in the statistics".into()))?;
    let values = diff
        .values
        .iter()
        .zip(&unc.values)
        .map(|(&d, &v)| (0.5 * (std.diffusion.standardize(d as f64) + u.standardize(v as f64))) as f32)
        .collect();
    ScoreMap::new(diff.height, diff.width, values, diff.resolution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserConfig, Layout, TensorKind};
    use crate::rng::seeded;
    use crate::trainer::{compute_stats, MeanStd, NormKind};
    use rand::Rng;

    #[test]
    fn directional_examples() {
        let e = [0.5f32, -1.0, 2.0];
        assert!((directional_score(&e, &e).unwrap().0 + 1.0).abs() < 1e-7);
        let neg: Vec<f32> = e.iter().map(|v| -v).collect();
        assert!((directional_score(&neg, &e).unwrap().0 - 1.0).abs() < 1e-7);
        assert_eq!(directional_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap().0, 0.0);
        assert_eq!(directional_score(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), (0.0, true));
        assert!(directional_score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn directional_is_scale_invariant() {
        let mut rng = seeded(2);
        for _ in 0..100 {
            let a: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c: f32 = rng.random_range(0.01..100.0);
            let ac: Vec<f32> = a.iter().map(|v| v * c).collect();
            let (s1, _) = directional_score(&a, &b).unwrap();
            let (s2, _) = directional_score(&ac, &b).unwrap();
            assert!((s1 - s2).abs() < 1e-5);
            assert!((-1.0..=1.0).contains(&s1));
        }
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_score(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_score(&[0.0; 4], &[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.25);
        assert!(mse_score(&[0.0; 3], &[0.0; 4]).is_err());
        let mut rng = seeded(4);
        let a: Vec<f32> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f32> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let oracle: f64 = a.iter().zip(&b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / 16.0;
        let got = mse_score(&a, &b).unwrap() as f64;
        assert!((got - oracle).abs() <= 1e-6 * oracle);
    }

    fn constant_map(v: f32, h: usize, w: usize) -> ScoreMap {
        ScoreMap::new(h, w, vec![v; h * w], Resolution::Patch).unwrap()
    }

    #[test]
    fn aggregation_examples() {
        let s = NoiseSchedule::default();
        let single = aggregate(&[(7, vec![0.5, -0.25])], &s).unwrap();
        assert_eq!(single[0], (s.sigma(7) * 0.5) as f32);
        assert_eq!(single[1], (s.sigma(7) * -0.25) as f32);
        let all: Vec<(usize, Vec<f32>)> = (1..=25).map(|t| (t, vec![1.0; 3])).collect();
        let agg = aggregate(&all, &s).unwrap();
        let expect: f64 = (1..=25).map(|t| s.sigma(t)).sum();
        assert!(agg.iter().all(|&v| v == expect as f32));
    }

    #[test]
    fn upsample_constant_and_single_pixel() {
        let up = upsample_scores(&constant_map(2.5, 3, 2), 9, 7).unwrap();
        assert!(up.values().iter().all(|&v| v == 2.5));
        assert_eq!(up.resolution(), Resolution::Pixel);
        let up = upsample_scores(&constant_map(-1.0, 1, 1), 5, 4).unwrap();
        assert!(up.values().iter().all(|&v| v == -1.0));
        assert!(upsample_scores(&constant_map(0.0, 4, 4), 3, 8).is_err());
    }

    #[test]
    fn upsample_2x2_to_4x4_center_weights() {
        let (a, b, c, d) = (1.0f64, 2.0, 5.0, -3.0);
        let m = ScoreMap::new(2, 2, vec![a as f32, b as f32, c as f32, d as f32], Resolution::Patch).unwrap();
        let up = upsample_scores(&m, 4, 4).unwrap();
        // pixel i maps to source (i + 0.5) / 2 - 0.5: 0.25 for i = 1 and 0.75 for i = 2
        let bil = |wy: f64, wx: f64| (1.0 - wy) * ((1.0 - wx) * a + wx * b) + wy * ((1.0 - wx) * c + wx * d);
        let at = |r: usize, col: usize| up.values()[r * 4 + col] as f64;
        assert!((at(1, 1) - bil(0.25, 0.25)).abs() < 1e-6);
        assert!((at(1, 2) - bil(0.25, 0.75)).abs() < 1e-6);
        assert!((at(2, 1) - bil(0.75, 0.25)).abs() < 1e-6);
        assert!((at(2, 2) - bil(0.75, 0.75)).abs() < 1e-6);
        // corners clamp to the source corners
        assert_eq!(at(0, 0), a);
        assert_eq!(at(3, 3), d);
        let (lo, hi) = (d, c);
        assert!(up.values().iter().all(|&v| (v as f64) >= lo && (v as f64) <= hi));
    }

    #[test]
    fn lse_examples() {
        let l = DenseTensor::from_f32(vec![1, 1, 2], vec![0.0, 0.0]).unwrap();
        let s = logsumexp_uncertainty(&l).unwrap();
        assert!((s.values()[0] as f64 + 2f64.ln()).abs() < 1e-6);

        let base = [0.3f32, -1.2, 2.0, 0.7, 0.1, -0.4];
        let shift = 5.0f32;
        let a = logsumexp_uncertainty(&DenseTensor::from_f32(vec![1, 2, 3], base.to_vec()).unwrap()).unwrap();
        let shifted: Vec<f32> = base.iter().map(|v| v + shift).collect();
        let b = logsumexp_uncertainty(&DenseTensor::from_f32(vec![1, 2, 3], shifted).unwrap()).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((y - (x - shift)).abs() < 1e-5);
        }
        let big = DenseTensor::from_f32(vec![1, 1, 3], vec![1e4, 1e4, -1e4]).unwrap();
        let s = logsumexp_uncertainty(&big).unwrap();
        assert!(s.values()[0].is_finite());
        assert!((s.values()[0] as f64 + 1e4 + 2f64.ln()).abs() < 1e-2);

        assert!(logsumexp_uncertainty(&DenseTensor::from_f32(vec![1, 1, 1], vec![0.0]).unwrap()).is_err());
        let nan = DenseTensor::from_f32(vec![1, 1, 2], vec![0.0, f32::NAN]).unwrap();
        assert!(logsumexp_uncertainty(&nan).is_err());
    }

    fn std_pair(md: f64, sd: f64, mu: f64, su: f64) -> ScoreStandardization {
        ScoreStandardization {
            diffusion: MeanStd { mean: md, std: sd },
            uncertainty: Some(MeanStd { mean: mu, std: su }),
        }
    }

    #[test]
    fn compound_examples() {
        let st = std_pair(0.375, 2.0, -1.0, 0.5);
        let c = compound(&constant_map(0.375, 2, 2), &constant_map(-1.0, 2, 2), &st).unwrap();
        assert!(c.values().iter().all(|&v| v == 0.0));

        let unit = std_pair(0.0, 1.0, 0.0, 1.0);
        let d = ScoreMap::new(1, 2, vec![1.0, 4.0], Resolution::Pixel).unwrap();
        let u = ScoreMap::new(1, 2, vec![3.0, -2.0], Resolution::Pixel).unwrap();
        assert_eq!(compound(&d, &u, &unit).unwrap().values(), &[2.0, 1.0]);

        let d2 = ScoreMap::new(1, 2, vec![1.0001, 4.0], Resolution::Pixel).unwrap();
        let c1 = compound(&d, &u, &st).unwrap();
        let c2 = compound(&d2, &u, &st).unwrap();
        assert!(c2.values()[0] > c1.values()[0]);
        assert!(compound(&d, &constant_map(0.0, 2, 1), &st).is_err());
    }

    /// Hand-set single-block network with every tensor filled from a seed.
    fn hand_net(c: usize, seed: u64) -> DenoiserParams<f32> {
        let cfg = DenoiserConfig::with_hidden(c, c, 1);
        let layout = Layout::new(&cfg).unwrap();
        let mut rng = seeded(seed);
        let values = layout
            .slots()
            .iter()
            .flat_map(|s| {
                let k = s.kind;
                (0..s.len())
                    .map(|_| match k {
                        TensorKind::NormScale => 1.0,
                        _ => rng.random_range(-0.5f32..0.5),
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        DenoiserParams::from_values(&cfg, values).unwrap()
    }

    #[test]
    fn score_map_matches_straight_line_computation() {
        let c = 4;
        let net = hand_net(c, 12);
        let sched = NoiseSchedule::default();
        let raw: Vec<f32> = (0..2 * 3 * c).map(|i| (i as f32 * 0.37).sin() * 3.0).collect();
        let fmap = FeatureMap::new(2, 3, c, raw.clone()).unwrap();
        let stats = compute_stats([&fmap], NormKind::MinMax).unwrap();
        let cfg = ScoreConfig {
            timesteps: vec![1, 2],
            noise_seed: 77,
            ..ScoreConfig::default()
        };
        let map = score_feature_map(&fmap, &net, &sched, &cfg, &stats, Execution::Sequential).unwrap();

        // oracle: f64 normalization, same noise streams, per-vector forward and cosine
        let net64 = net.cast::<f64>();
        let mut expect = vec![0.0f64; 6];
        for &t in &[1usize, 2] {
            let mut rng = stream(77, &[t as u64, 0]);
            let mut eps = vec![0.0f32; raw.len()];
            fill_standard_normal(&mut rng, &mut eps);
            for i in 0..6 {
                let x0: Vec<f64> = (0..c)
                    .map(|k| {
                        let (lo, hi) = (stats.per_channel_min[k], stats.per_channel_max[k]);
                        2.0 * (raw[i * c + k] as f64 - lo) / (hi - lo) - 1.0
                    })
                    .collect();
                let e: Vec<f64> = eps[i * c..(i + 1) * c].iter().map(|&v| v as f64).collect();
                let xt: Vec<f64> = x0
                    .iter()
                    .zip(&e)
                    .map(|(x, n)| sched.alpha_bar(t).sqrt() * x + sched.sigma(t) * n)
                    .collect();
                let eh = net64.forward(&xt, t).unwrap();
                let dot: f64 = eh.iter().zip(&e).map(|(a, b)| a * b).sum();
                let na = eh.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nb = e.iter().map(|a| a * a).sum::<f64>().sqrt();
                expect[i] += sched.sigma(t) * (-dot / (na * nb));
            }
        }
        for (g, e) in map.values().iter().zip(&expect) {
            assert!((*g as f64 - e).abs() < 1e-5, "{g} vs {e}");
        }
        // single timestep equals the weighted per-timestep map
        let one = ScoreConfig {
            timesteps: vec![2],
            ..cfg.clone()
        };
        let agg = score_feature_map(&fmap, &net, &sched, &one, &stats, Execution::Sequential).unwrap();
        let raw_t = timestep_maps(&fmap, &net, &sched, &one, &stats, Execution::Sequential).unwrap();
        for (a, r) in agg.values().iter().zip(raw_t[0].1.values()) {
            assert_eq!(*a, (sched.sigma(2) * *r as f64) as f32);
        }
    }

    #[test]
    fn scoring_rejects_mismatch_and_trivial_models() {
        let sched = NoiseSchedule::default();
        let net = hand_net(4, 1);
        let fmap = FeatureMap::new(1, 2, 3, vec![0.0, 1.0, 2.0, 1.0, 0.5, 0.0]).unwrap();
        let stats = compute_stats([&fmap], NormKind::MinMax).unwrap();
        let err = score_feature_map(&fmap, &net, &sched, &ScoreConfig::default(), &stats, Execution::Sequential)
            .unwrap_err();
        assert!(err.to_string().contains("C = 4"));

        let zero = DenoiserParams::init(&DenoiserConfig::new(3), &mut seeded(0)).unwrap();
        assert!(score_feature_map(&fmap, &zero, &sched, &ScoreConfig::default(), &stats, Execution::Sequential)
            .is_err());

        let bad = ScoreConfig {
            kind: ScoreKind::MseScore,
            ..ScoreConfig::default()
        };
        assert!(bad.validate(&sched).is_err());
        let bad_t = ScoreConfig {
            timesteps: vec![0],
            ..ScoreConfig::default()
        };
        assert!(bad_t.validate(&sched).is_err());
    }

    #[test]
    fn recon_is_non_negative_and_rejects_t0() {
        let sched = NoiseSchedule::default();
        let net = hand_net(4, 3);
        let mut rng = seeded(5);
        for t in [1usize, 2, 5] {
            let s = recon_score(&net, &[0.1, -0.2, 0.3, 0.0], t, &sched, &mut rng).unwrap();
            assert!(s >= 0.0);
        }
        assert!(recon_score(&net, &[0.1, -0.2, 0.3, 0.0], 0, &sched, &mut rng).is_err());
    }

    #[test]
    fn recon_at_t1_is_scaled_mse_score() {
        let sched = NoiseSchedule::default();
        let c = 4;
        let net = hand_net(c, 6);
        let mut x0 = vec![0.0f32; 2000 * c];
        fill_standard_normal(&mut seeded(9), &mut x0);
        let run = |kind| timestep_scores(&net, &x0, 1, kind, &sched, 3, 1, Execution::Sequential).unwrap().0;
        let (score, recon) = (run(ScoreKind::MseScore), run(ScoreKind::MseRecon));
        let k = sched.sigma(1).powi(2) / sched.alpha(1);
        for (s, r) in score.iter().zip(&recon) {
            assert!((*r as f64 - k * *s as f64).abs() <= 1e-6 * k * *s as f64, "{r} vs {s}");
        }
        let order = |v: &[f32]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
            idx
        };
        assert_eq!(order(&score), order(&recon));
    }

    #[test]
    fn parallel_scores_equal_sequential() {
        let c = 4;
        let net = hand_net(c, 8);
        let sched = NoiseSchedule::default();
        let raw: Vec<f32> = (0..20 * 20 * c).map(|i| ((i * 7919) % 101) as f32 / 50.0).collect();
        let fmap = FeatureMap::new(20, 20, c, raw).unwrap();
        let stats = compute_stats([&fmap], NormKind::MinMax).unwrap();
        let cfg = ScoreConfig {
            timesteps: vec![1, 3, 9],
            ..ScoreConfig::default()
        };
        let a = score_feature_map(&fmap, &net, &sched, &cfg, &stats, Execution::Sequential).unwrap();
        let b = score_feature_map(&fmap, &net, &sched, &cfg, &stats, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn heatmap_spans_full_range() {
        let m = ScoreMap::new(1, 3, vec![-2.0, 0.0, 2.0], Resolution::Pixel).unwrap();
        assert_eq!(m.heatmap().as_u8().unwrap(), &[0, 128, 255]);
        assert_eq!(constant_map(1.0, 1, 2).heatmap().as_u8().unwrap(), &[0, 0]);
    }
}
