//! Synthetic ground truth: diagonal Gaussian mixtures, planted OoD regions,
//! and the closed-form score of the noise-smoothed mixture.
//!
//! Diffusing a component `N(mu, diag(v))` to step `t` gives
//! `N(sqrt(abar) mu, abar v + (1 - abar))`, so the smoothed density stays a
//! diagonal mixture and its score is exact.

use rand::Rng;

use crate::error::{Error, Result};
use crate::exec::{self, Execution, CHUNK_ROWS};
use crate::rng::{derive_seed, fill_standard_normal, stream};
use crate::schedule::NoiseSchedule;
use crate::scorer::NoisePredictor;
use crate::tensor_store::{DenseTensor, FeatureMap, OodMask, LABEL_INLIER, LABEL_OOD};
use crate::trainer::DatasetStats;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmSpec {
    dim: usize,
    components: Vec<GmmComponent>,
}

impl GmmSpec {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let dim = components
            .first()
            .map(|c| c.mean.len())
            .ok_or_else(|| Error::invalid("mixture needs at least one component"))?;
        if dim == 0 {
            return Err(Error::invalid("mixture dimension must be >= 1"));
        }
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.cov_diag.len() != dim {
                return Err(Error::shape(format!("component {k} does not have dimension {dim}")));
            }
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::invalid(format!("component {k} weight must be positive")));
            }
            if c.cov_diag.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::invalid(format!(
                    "component {k} needs finite mean and positive variances"
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { dim, components })
    }

    /// One isotropic component.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let cov_diag = vec![var; mean.len()];
        Self::new(vec![GmmComponent {
            weight: 1.0,
            mean,
            cov_diag,
        }])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    /// Distribution of `scale * x + offset` per channel.
    pub fn affine(&self, scale: &[f64], offset: &[f64]) -> Result<Self> {
        if scale.len() != self.dim || offset.len() != self.dim {
            return Err(Error::shape("affine map dimension differs from the mixture"));
        }
        Self::new(
            self.components
                .iter()
                .map(|c| GmmComponent {
                    weight: c.weight,
                    mean: c.mean.iter().zip(scale).zip(offset).map(|((m, s), o)| s * m + o).collect(),
                    cov_diag: c.cov_diag.iter().zip(scale).map(|(v, s)| s * s * v).collect(),
                })
                .collect(),
        )
    }

    /// The mixture after forward diffusion to step `t`.
    pub fn diffused(&self, t: usize, sched: &NoiseSchedule) -> Result<Self> {
        sched.check(t)?;
        let ab = sched.alpha_bar(t);
        let a = ab.sqrt();
        Ok(Self {
            dim: self.dim,
            components: self
                .components
                .iter()
                .map(|c| GmmComponent {
                    weight: c.weight,
                    mean: c.mean.iter().map(|m| a * m).collect(),
                    cov_diag: c.cov_diag.iter().map(|v| ab * v + (1.0 - ab)).collect(),
                })
                .collect(),
        })
    }

    fn component_log_terms(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                let mut q = 0.0;
                for ((xi, m), v) in x.iter().zip(&c.mean).zip(&c.cov_diag) {
                    q += (xi - m).powi(2) / v + v.ln() + LN_2PI;
                }
                c.weight.ln() - 0.5 * q
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok(log_sum_exp(&self.component_log_terms(x)))
    }

    /// Gradient of the log-density, with responsibilities kept in the log domain.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let mut out = vec![0.0; self.dim];
        self.score_into(x, &mut out);
        Ok(out)
    }

    fn score_into(&self, x: &[f64], out: &mut [f64]) {
        let logs = self.component_log_terms(x);
        let lse = log_sum_exp(&logs);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (c, l) in self.components.iter().zip(logs) {
            let r = (l - lse).exp();
            for (((o, xi), m), v) in out.iter_mut().zip(x).zip(&c.mean).zip(&c.cov_diag) {
                *o -= r * (xi - m) / v;
            }
        }
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::shape(format!(
                "point has {} channels, mixture has {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `n` draws, row-major `[n, C]`.
pub fn sample_gmm<R: Rng + ?Sized>(spec: &GmmSpec, n: usize, rng: &mut R) -> Vec<f32> {
    let c = spec.dim;
    let mut out = vec![0.0f32; n * c];
    let mut z = vec![0.0f32; c];
    for row in out.chunks_exact_mut(c) {
        let comp = pick_component(spec, rng.random::<f64>());
        fill_standard_normal(rng, &mut z);
        for (((o, m), v), zi) in row.iter_mut().zip(&comp.mean).zip(&comp.cov_diag).zip(&z) {
            *o = (m + v.sqrt() * *zi as f64) as f32;
        }
    }
    out
}

fn pick_component(spec: &GmmSpec, u: f64) -> &GmmComponent {
    let mut acc = 0.0;
    for comp in &spec.components {
        acc += comp.weight;
        if u < acc {
            return comp;
        }
    }
    spec.components.last().expect("validated non-empty")
}

/// Score of the mixture diffused to step `t`, evaluated at `x_t`.
pub fn smoothed_gmm_score(spec: &GmmSpec, x_t: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    spec.diffused(t, sched)?.score(x_t)
}

/// Bayes-optimal noise prediction `-sigma_t * score`.
pub fn oracle_eps(spec: &GmmSpec, x_t: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    let s = sched.sigma(t);
    Ok(smoothed_gmm_score(spec, x_t, t, sched)?
        .into_iter()
        .map(|v| -s * v)
        .collect())
}

/// Analytic denoiser for data drawn from `spec`, working in the normalized
/// space defined by `stats`.
#[derive(Debug, Clone)]
pub struct GmmOracle {
    normalized: GmmSpec,
    diffused: Vec<GmmSpec>,
    sigma: Vec<f64>,
}

impl GmmOracle {
    pub fn new(raw: &GmmSpec, stats: &DatasetStats, sched: &NoiseSchedule) -> Result<Self> {
        if stats.channels() != raw.dim() {
            return Err(Error::shape(format!(
                "statistics have C = {}, mixture has C = {}",
                stats.channels(),
                raw.dim()
            )));
        }
        let (scale, offset) = stats.channel_affine();
        Self::in_normalized_space(raw.affine(&scale, &offset)?, sched)
    }

    pub fn in_normalized_space(normalized: GmmSpec, sched: &NoiseSchedule) -> Result<Self> {
        let diffused = (1..=sched.len())
            .map(|t| normalized.diffused(t, sched))
            .collect::<Result<_>>()?;
        Ok(Self {
            normalized,
            diffused,
            sigma: (1..=sched.len()).map(|t| sched.sigma(t)).collect(),
        })
    }

    pub fn normalized_spec(&self) -> &GmmSpec {
        &self.normalized
    }
}

impl NoisePredictor for GmmOracle {
    fn input_dim(&self) -> usize {
        self.normalized.dim
    }

    fn predict(&self, x_t: &[f32], timesteps: &[usize], exec: Execution) -> Result<Vec<f32>> {
        let c = self.normalized.dim;
        if x_t.len() != timesteps.len() * c {
            return Err(Error::shape(format!(
                "{} values for {} timesteps of dimension {c}",
                x_t.len(),
                timesteps.len()
            )));
        }
        if let Some(&t) = timesteps.iter().find(|&&t| t == 0 || t > self.sigma.len()) {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.sigma.len())));
        }
        let mut out = vec![0.0f32; x_t.len()];
        exec::for_each_chunk_mut(exec, &mut out, c, CHUNK_ROWS, |rows, chunk| {
            let mut x = vec![0.0f64; c];
            let mut s = vec![0.0f64; c];
            for (k, i) in rows.enumerate() {
                let t = timesteps[i];
                x.iter_mut().zip(&x_t[i * c..(i + 1) * c]).for_each(|(a, &b)| *a = b as f64);
                self.diffused[t - 1].score_into(&x, &mut s);
                let sg = self.sigma[t - 1];
                for (o, v) in chunk[k * c..(k + 1) * c].iter_mut().zip(&s) {
                    *o = (-sg * v) as f32;
                }
            }
        });
        Ok(out)
    }
}

/// Fills an axis-aligned rectangle of roughly `fraction` of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.top && r < self.top + self.height && c >= self.left && c < self.left + self.width
    }
}

/// Rectangle size for a region covering about `fraction` of an `h x w` grid,
/// with the grid's aspect ratio.
pub fn region_size(h: usize, w: usize, fraction: f64) -> Result<(usize, usize)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("ood fraction {fraction} outside (0, 1)")));
    }
    let area = ((fraction * (h * w) as f64).round() as usize).max(1);
    let rh = ((area as f64 * h as f64 / w as f64).sqrt().round() as usize).max(1);
    let rw = ((area as f64 / rh as f64).round() as usize).max(1);
    if rh > h || rw > w {
        return Err(Error::invalid(format!(
            "a {rh}x{rw} region does not fit a {h}x{w} grid"
        )));
    }
    Ok((rh, rw))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub n_maps: usize,
    pub height: usize,
    pub width: usize,
    pub ood_fraction: f64,
    /// Mask pixels per patch along each axis.
    pub pixels_per_patch: usize,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub maps: Vec<FeatureMap>,
    pub masks: Vec<OodMask>,
    pub regions: Vec<Region>,
}

/// Maps of inlier patches from `spec_in`, each with one rectangle of patches
/// drawn from `N(ood_mean, I)` and marked OoD in the mask. Map `i` uses the
/// stream `(seed, i)` regardless of how many maps are generated or in which
/// order.
pub fn make_synthetic_benchmark(
    spec_in: &GmmSpec,
    ood_mean: &[f64],
    cfg: &BenchmarkConfig,
    seed: u64,
    exec: Execution,
) -> Result<Benchmark> {
    let c = spec_in.dim();
    if ood_mean.len() != c {
        return Err(Error::shape(format!("ood mean has {} channels, mixture has {c}", ood_mean.len())));
    }
    if cfg.height == 0 || cfg.width == 0 || cfg.pixels_per_patch == 0 {
        return Err(Error::invalid("benchmark grid dimensions must be >= 1"));
    }
    let (rh, rw) = region_size(cfg.height, cfg.width, cfg.ood_fraction)?;
    let ood = GmmSpec::isotropic(ood_mean.to_vec(), 1.0)?;
    let made = exec::map_chunks(exec, cfg.n_maps, 1, |r| {
        let i = r.start;
        let mut rng = stream(seed, &[i as u64]);
        let region = Region {
            top: rng.random_range(0..=cfg.height - rh),
            left: rng.random_range(0..=cfg.width - rw),
            height: rh,
            width: rw,
        };
        let inl = sample_gmm(spec_in, cfg.height * cfg.width, &mut rng);
        let out = sample_gmm(&ood, region.area(), &mut rng);
        (region, inl, out)
    });
    let mut bench = Benchmark {
        maps: Vec::with_capacity(cfg.n_maps),
        masks: Vec::with_capacity(cfg.n_maps),
        regions: Vec::with_capacity(cfg.n_maps),
    };
    for (region, mut values, out) in made {
        let mut k = 0;
        for r in region.top..region.top + region.height {
            for col in region.left..region.left + region.width {
                let at = (r * cfg.width + col) * c;
                values[at..at + c].copy_from_slice(&out[k * c..(k + 1) * c]);
                k += 1;
            }
        }
        let p = cfg.pixels_per_patch;
        let (mh, mw) = (cfg.height * p, cfg.width * p);
        let labels = (0..mh * mw)
            .map(|i| {
                if region.contains(i / mw / p, i % mw / p) {
                    LABEL_OOD
                } else {
                    LABEL_INLIER
                }
            })
            .collect();
        bench.maps.push(FeatureMap::new(cfg.height, cfg.width, c, values)?);
        bench.masks.push(OodMask::new(mh, mw, labels)?);
        bench.regions.push(region);
    }
    Ok(bench)
}

/// Inlier-only maps for training.
pub fn make_inlier_maps(spec: &GmmSpec, n_maps: usize, height: usize, width: usize, seed: u64) -> Result<Vec<FeatureMap>> {
    (0..n_maps)
        .map(|i| {
            let mut rng = stream(seed, &[i as u64]);
            FeatureMap::new(height, width, spec.dim(), sample_gmm(spec, height * width, &mut rng))
        })
        .collect()
}

/// Row `i` of the order-16 Sylvester Hadamard matrix, scaled to unit length.
fn hadamard_direction(i: usize, dim: usize) -> Vec<f64> {
    let norm = (dim as f64).sqrt();
    (0..dim)
        .map(|j| if (i & j).count_ones() % 2 == 0 { 1.0 / norm } else { -1.0 / norm })
        .collect()
}

/// Parameters of the standard benchmark: three equal-weight components whose
/// means form an equilateral triangle with side `spacing`, and an OoD cluster
/// at `ood_distance` from every component mean.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardBenchmark {
    pub dim: usize,
    pub spacing: f64,
    pub ood_distance: f64,
    pub inlier_std: f64,
    pub bench: BenchmarkConfig,
    pub n_train_maps: usize,
}

impl Default for StandardBenchmark {
    fn default() -> Self {
        Self {
            dim: 16,
            spacing: 6.0,
            ood_distance: 8.0,
            inlier_std: 0.003,
            bench: BenchmarkConfig {
                n_maps: 200,
                height: 32,
                width: 32,
                ood_fraction: 0.1,
                pixels_per_patch: 1,
            },
            n_train_maps: 200,
        }
    }
}

impl StandardBenchmark {
    /// Inlier mixture and OoD mean. The triangle lies in the plane of two
    /// sign-pattern directions, so every channel sees the same spread of means
    /// and min/max normalization treats channels alike; the OoD mean sits on a
    /// third, orthogonal direction through the centroid.
    pub fn mixture(&self) -> Result<(GmmSpec, Vec<f64>)> {
        let d = self.dim;
        if d < 4 || !d.is_power_of_two() {
            return Err(Error::invalid(format!(
                "standard benchmark needs a power-of-two dimension >= 4, got {d}"
            )));
        }
        let circumradius = self.spacing / 3f64.sqrt();
        if self.ood_distance <= circumradius {
            return Err(Error::invalid(format!(
                "ood distance must exceed the triangle circumradius {circumradius}"
            )));
        }
        let (u1, u2, u3) = (hadamard_direction(1, d), hadamard_direction(2, d), hadamard_direction(3, d));
        let s = self.spacing;
        let corners = [(0.0, 0.0), (s, 0.0), (s / 2.0, s * 3f64.sqrt() / 2.0)];
        let point = |a: f64, b: f64| -> Vec<f64> { u1.iter().zip(&u2).map(|(x, y)| a * x + b * y).collect() };
        let var = self.inlier_std * self.inlier_std;
        let components = corners
            .iter()
            .map(|&(a, b)| GmmComponent {
                weight: 1.0 / 3.0,
                mean: point(a, b),
                cov_diag: vec![var; d],
            })
            .collect();
        let height = (self.ood_distance.powi(2) - circumradius.powi(2)).sqrt();
        let centroid = point(s / 2.0, s * 3f64.sqrt() / 6.0);
        let ood_mean = centroid.iter().zip(&u3).map(|(c, u)| c + height * u).collect();
        Ok((GmmSpec::new(components)?, ood_mean))
    }

    pub fn generate(&self, seed: u64, exec: Execution) -> Result<(Vec<FeatureMap>, Benchmark)> {
        let (spec, ood_mean) = self.mixture()?;
        let train = make_inlier_maps(
            &spec,
            self.n_train_maps,
            self.bench.height,
            self.bench.width,
            derive_seed(seed, &[0]),
        )?;
        let test = make_synthetic_benchmark(&spec, &ood_mean, &self.bench, derive_seed(seed, &[1]), exec)?;
        Ok((train, test))
    }
}

/// `[H, W, K]` logits whose negative log-sum-exp is `signal` higher on OoD
/// pixels than on inliers, plus unit Gaussian noise independent of the
/// features. Ignored pixels are treated as inliers.
pub fn simulated_logits<R: Rng + ?Sized>(mask: &OodMask, classes: usize, signal: f64, rng: &mut R) -> Result<DenseTensor> {
    if classes < 2 {
        return Err(Error::invalid("simulated logits need at least two classes"));
    }
    let mut values = Vec::with_capacity(mask.labels().len() * classes);
    let mut z = vec![0.0f32; 1 + classes];
    for &l in mask.labels() {
        fill_standard_normal(rng, &mut z);
        let u = if l == LABEL_OOD { signal } else { 0.0 } + z[0] as f64;
        // class logits jitter around a common level; the level sets the uncertainty
        let jitter: Vec<f64> = z[1..].iter().map(|&v| 0.5 * v as f64).collect();
        let lse = log_sum_exp(&jitter);
        values.extend(jitter.iter().map(|j| (j - lse - u) as f32));
    }
    DenseTensor::from_f32(vec![mask.height(), mask.width(), classes], values)
}
