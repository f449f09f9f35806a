//! Checkpoint directories: one DTF file per parameter tensor plus a plain
//! `key=value` manifest holding the configuration, schedule and statistics.
//!
//! Floats in the manifest use the shortest decimal form that parses back to
//! the same bits, so a save/load round trip is exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::denoiser::{DenoiserConfig, DenoiserParams, Layout, SkipMode};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::schedule::NoiseSchedule;
use crate::scorer::NoisePredictor;
use crate::synth::{GmmComponent, GmmOracle, GmmSpec};
use crate::tensor_store::{read_tensor, write_tensor, DenseTensor};
use crate::trainer::{AdamConfig, DatasetStats, MeanStd, NormKind, ScoreStandardization, TrainConfig};

pub const MANIFEST: &str = "manifest.txt";
const FORMAT: &str = "dood-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    /// Trained network.
    Mlp(DenoiserParams<f32>),
    /// Analytic denoiser of a known mixture, given in raw feature space.
    Oracle(GmmSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub stats: DatasetStats,
    pub schedule: NoiseSchedule,
    pub train: Option<TrainConfig>,
}

/// Borrowed network or materialized oracle, usable by the scorer.
pub enum Predictor<'a> {
    Mlp(&'a DenoiserParams<f32>),
    Oracle(Box<GmmOracle>),
}

impl NoisePredictor for Predictor<'_> {
    fn input_dim(&self) -> usize {
        match self {
            Predictor::Mlp(p) => p.input_dim(),
            Predictor::Oracle(o) => o.input_dim(),
        }
    }

    fn predict(&self, x_t: &[f32], timesteps: &[usize], exec: Execution) -> Result<Vec<f32>> {
        match self {
            Predictor::Mlp(p) => p.predict(x_t, timesteps, exec),
            Predictor::Oracle(o) => o.predict(x_t, timesteps, exec),
        }
    }

    fn is_trivial(&self) -> bool {
        match self {
            Predictor::Mlp(p) => p.is_trivial(),
            Predictor::Oracle(_) => false,
        }
    }
}

impl Checkpoint {
    pub fn input_dim(&self) -> usize {
        match &self.model {
            Model::Mlp(p) => p.config().input_dim,
            Model::Oracle(g) => g.dim(),
        }
    }

    pub fn predictor(&self) -> Result<Predictor<'_>> {
        Ok(match &self.model {
            Model::Mlp(p) => Predictor::Mlp(p),
            Model::Oracle(g) => Predictor::Oracle(Box::new(GmmOracle::new(g, &self.stats, &self.schedule)?)),
        })
    }
}

fn tensor_file(index: usize, role: &str) -> String {
    format!("p{index:03}_{role}.dtf")
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn save_checkpoint(ck: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if ck.stats.channels() != ck.input_dim() {
        return Err(Error::shape(format!(
            "statistics have C = {}, model has C = {}",
            ck.stats.channels(),
            ck.input_dim()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = String::new();
    let mut kv = |k: &str, v: String| {
        writeln!(m, "{k}={v}").expect("writing to a String cannot fail");
    };
    kv("format", FORMAT.into());
    kv("version", VERSION.to_string());
    let s = &ck.schedule;
    kv("schedule.timesteps", s.len().to_string());
    kv("schedule.beta_start", s.beta_start().to_string());
    kv("schedule.beta_end", s.beta_end().to_string());
    let st = &ck.stats;
    kv("stats.kind", st.kind.as_str().into());
    kv("stats.channels", st.channels().to_string());
    kv("stats.min", join(&st.per_channel_min));
    kv("stats.max", join(&st.per_channel_max));
    kv("stats.mean", join(&st.per_channel_mean));
    kv("stats.std", join(&st.per_channel_std));
    if let Some(sc) = &st.scores {
        kv("score.diffusion_mean", sc.diffusion.mean.to_string());
        kv("score.diffusion_std", sc.diffusion.std.to_string());
        if let Some(u) = &sc.uncertainty {
            kv("score.uncertainty_mean", u.mean.to_string());
            kv("score.uncertainty_std", u.std.to_string());
        }
    }
    if let Some(t) = &ck.train {
        kv("train.iterations", t.iterations.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.learning_rate", t.adam.learning_rate.to_string());
        kv("train.beta1", t.adam.beta1.to_string());
        kv("train.beta2", t.adam.beta2.to_string());
        kv("train.eps", t.adam.eps.to_string());
    }
    match &ck.model {
        Model::Mlp(p) => {
            let c = p.config();
            kv("model", "mlp".into());
            kv("net.input_dim", c.input_dim.to_string());
            kv("net.hidden_dim", c.hidden_dim.to_string());
            kv("net.n_input_blocks", c.n_input_blocks.to_string());
            kv("net.n_output_blocks", c.n_output_blocks.to_string());
            kv("net.groupnorm_groups", c.groupnorm_groups.to_string());
            kv("net.skip", c.skip.as_str().into());
            kv("net.tensors", p.layout().slots().len().to_string());
            for (i, slot) in p.layout().slots().iter().enumerate() {
                let name = tensor_file(i, &slot.role);
                let t = DenseTensor::from_f32(slot.shape.clone(), p.tensor(i).to_vec())?;
                write_tensor(dir.join(&name), &t)?;
                kv(&format!("tensor.{i:03}"), name);
            }
        }
        Model::Oracle(g) => {
            kv("model", "gmm-oracle".into());
            kv("gmm.dim", g.dim().to_string());
            kv("gmm.components", g.components().len().to_string());
            for (k, c) in g.components().iter().enumerate() {
                kv(&format!("gmm.{k}.weight"), c.weight.to_string());
                kv(&format!("gmm.{k}.mean"), join(&c.mean));
                kv(&format!("gmm.{k}.cov_diag"), join(&c.cov_diag));
            }
        }
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, m).map_err(|e| Error::io(&path, e))
}

struct Manifest(BTreeMap<String, String>);

impl Manifest {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("manifest line {} is not key=value", n + 1)))?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Checkpoint(format!("duplicate manifest key {k:?}")));
            }
        }
        Ok(Self(map))
    }

    fn has(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    fn str(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("manifest is missing {key:?}")))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.str(key)?;
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("manifest value {key}={v:?} does not parse")))
    }

    fn list(&self, key: &str, len: usize) -> Result<Vec<f64>> {
        let v = self.str(key)?;
        let out = v
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Checkpoint(format!("manifest list {key} does not parse")))?;
        if out.len() != len {
            return Err(Error::Checkpoint(format!(
                "manifest list {key} has {} entries, expected {len}",
                out.len()
            )));
        }
        Ok(out)
    }
}

fn checkpoint_err(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Checkpoint(m),
        other => other,
    }
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m = Manifest::parse(&text)?;
    if m.str("format")? != FORMAT {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint manifest", path.display())));
    }
    let version: u32 = m.get("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let schedule = NoiseSchedule::linear(
        m.get("schedule.timesteps")?,
        m.get("schedule.beta_start")?,
        m.get("schedule.beta_end")?,
    )
    .map_err(checkpoint_err)?;

    let c: usize = m.get("stats.channels")?;
    let scores = if m.has("score.diffusion_mean") {
        let uncertainty = if m.has("score.uncertainty_mean") {
            Some(MeanStd {
                mean: m.get("score.uncertainty_mean")?,
                std: m.get("score.uncertainty_std")?,
            })
        } else {
            None
        };
        Some(ScoreStandardization {
            diffusion: MeanStd {
                mean: m.get("score.diffusion_mean")?,
                std: m.get("score.diffusion_std")?,
            },
            uncertainty,
        })
    } else {
        None
    };
    let stats = DatasetStats {
        kind: NormKind::parse(m.str("stats.kind")?).map_err(checkpoint_err)?,
        per_channel_min: m.list("stats.min", c)?,
        per_channel_max: m.list("stats.max", c)?,
        per_channel_mean: m.list("stats.mean", c)?,
        per_channel_std: m.list("stats.std", c)?,
        scores,
    };
    stats.validate()?;

    let train = if m.has("train.iterations") {
        Some(TrainConfig {
            iterations: m.get("train.iterations")?,
            batch_size: m.get("train.batch_size")?,
            seed: m.get("train.seed")?,
            adam: AdamConfig {
                learning_rate: m.get("train.learning_rate")?,
                beta1: m.get("train.beta1")?,
                beta2: m.get("train.beta2")?,
                eps: m.get("train.eps")?,
            },
        })
    } else {
        None
    };

    let model = match m.str("model")? {
        "mlp" => Model::Mlp(load_mlp(dir, &m)?),
        "gmm-oracle" => {
            let dim: usize = m.get("gmm.dim")?;
            let k: usize = m.get("gmm.components")?;
            let comps = (0..k)
                .map(|i| {
                    Ok(GmmComponent {
                        weight: m.get(&format!("gmm.{i}.weight"))?,
                        mean: m.list(&format!("gmm.{i}.mean"), dim)?,
                        cov_diag: m.list(&format!("gmm.{i}.cov_diag"), dim)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Model::Oracle(GmmSpec::new(comps).map_err(checkpoint_err)?)
        }
        other => return Err(Error::Checkpoint(format!("unknown model kind {other:?}"))),
    };
    let ck = Checkpoint {
        model,
        stats,
        schedule,
        train,
    };
    if ck.input_dim() != c {
        return Err(Error::Checkpoint(format!(
            "model has C = {}, statistics have C = {c}",
            ck.input_dim()
        )));
    }
    Ok(ck)
}

fn load_mlp(dir: &Path, m: &Manifest) -> Result<DenoiserParams<f32>> {
    let cfg = DenoiserConfig {
        input_dim: m.get("net.input_dim")?,
        hidden_dim: m.get("net.hidden_dim")?,
        n_input_blocks: m.get("net.n_input_blocks")?,
        n_output_blocks: m.get("net.n_output_blocks")?,
        groupnorm_groups: m.get("net.groupnorm_groups")?,
        skip: SkipMode::parse(m.str("net.skip")?).map_err(checkpoint_err)?,
    };
    cfg.validate().map_err(checkpoint_err)?;
    let layout = Layout::new(&cfg).map_err(checkpoint_err)?;
    let declared: usize = m.get("net.tensors")?;
    if declared != layout.slots().len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {declared} tensors, configuration implies {}",
            layout.slots().len()
        )));
    }
    let mut values = Vec::with_capacity(layout.total());
    for (i, slot) in layout.slots().iter().enumerate() {
        let expect = tensor_file(i, &slot.role);
        let listed = m.str(&format!("tensor.{i:03}"))?;
        if listed != expect {
            return Err(Error::Checkpoint(format!("tensor {i} is {listed:?}, expected {expect:?}")));
        }
        let path = dir.join(&expect);
        if !path.is_file() {
            return Err(Error::Checkpoint(format!("missing tensor file {}", path.display())));
        }
        let t = read_tensor(&path)?;
        if t.shape() != slot.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{expect} has shape {:?}, configuration implies {:?}",
                t.shape(),
                slot.shape
            )));
        }
        let data = t.as_f32().map_err(|_| Error::Checkpoint(format!("{expect} is not float32")))?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("{expect} holds non-finite values")));
        }
        values.extend_from_slice(data);
    }
    DenoiserParams::from_values(&cfg, values)
}
