//! Command-line interface.
//!
//! Every command writes `run_manifest.txt` beside its outputs. Reports are
//! tab-separated UTF-8. Exit codes: 0 success, 2 usage, 3 data, 4 numerical.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Model};
use crate::metrics::{bootstrap, ImagePixels, PooledEval};
use crate::rng::{derive_seed, hash_str, stream};
use crate::scorer::{self, Resolution, ScoreConfig, ScoreKind, ScoreMap};
use crate::synth::{simulated_logits, StandardBenchmark};
use crate::tensor_store::{read_tensor, write_tensor, DenseTensor, FeatureMap, OodMask};
use crate::trainer::{self, compute_stats, AdamConfig, NormKind, TrainConfig, TrainingSet};
use crate::{DenoiserConfig, Error, Execution, NoiseSchedule, Result};

pub const RUN_MANIFEST: &str = "run_manifest.txt";
const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "dood", version, about = "Diffusion score matching for dense OoD detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-channel statistics of a directory of feature maps.
    Stats(StatsArgs),
    /// Train a denoiser on a directory of in-distribution feature maps.
    Train(TrainArgs),
    /// Score feature maps with a checkpoint.
    Score(ScoreArgs),
    /// Pixel-level AP and FPR95 of score maps against masks.
    Eval(EvalArgs),
    /// Write the synthetic Gaussian-mixture benchmark.
    Synth(SynthArgs),
    /// Timestep sweep and score-kind comparison on a benchmark.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Master seed.
    #[arg(long, env = "DOOD_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 1 is bitwise reproducible, 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = crate::schedule::DEFAULT_TIMESTEPS)]
    pub diffusion_steps: usize,
    #[arg(long, default_value_t = crate::schedule::DEFAULT_BETA_START)]
    pub beta_start: f64,
    #[arg(long, default_value_t = crate::schedule::DEFAULT_BETA_END)]
    pub beta_end: f64,
}

impl ScheduleArgs {
    fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Directory of `[H, W, C]` feature maps.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// minmax or meanstd.
    #[arg(long, default_value = "minmax")]
    pub norm: String,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 70_000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 4096)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5e-5)]
    pub learning_rate: f64,
    /// Defaults to the channel count.
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Input blocks and output blocks each.
    #[arg(long, default_value_t = 6)]
    pub blocks: usize,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long, default_value = "minmax")]
    pub norm: String,
    /// Also derive score standardization constants from the training maps.
    #[arg(long)]
    pub score_stats: bool,
    /// Logits matching the training maps by stem, for uncertainty standardization.
    #[arg(long, requires = "score_stats")]
    pub logits: Option<PathBuf>,
    /// Timesteps used for score standardization.
    #[arg(long, default_value = "1..25", value_parser = parse_timesteps)]
    pub timesteps: Timesteps,
    /// Log the loss every this many iterations; 0 disables logging.
    #[arg(long, default_value_t = 0)]
    pub log_every: usize,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A feature map file or a directory of them.
    #[arg(long)]
    pub features: PathBuf,
    /// Logits file or directory matched by stem; enables compounding.
    #[arg(long)]
    pub logits: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "1..25", value_parser = parse_timesteps)]
    pub timesteps: Timesteps,
    /// directional, mse-score or mse-recon.
    #[arg(long, default_value = "directional")]
    pub score_kind: String,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Pixel-map size relative to the patch grid, per axis.
    #[arg(long, default_value_t = 1)]
    pub upsample: usize,
    /// Also write an 8-bit heat map.
    #[arg(long)]
    pub heatmap: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of pixel score maps.
    #[arg(long)]
    pub scores: PathBuf,
    /// Directory of masks with the same file stems.
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Bootstrap folds; 0 disables resampling.
    #[arg(long, default_value_t = 0)]
    pub bootstrap_folds: usize,
    #[arg(long, default_value_t = 0.9)]
    pub bootstrap_fraction: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n_maps: usize,
    #[arg(long, default_value_t = 200)]
    pub n_train_maps: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub ood_fraction: f64,
    #[arg(long, default_value_t = 6.0)]
    pub spacing: f64,
    #[arg(long, default_value_t = 8.0)]
    pub ood_distance: f64,
    #[arg(long, default_value_t = 0.003)]
    pub inlier_std: f64,
    #[arg(long, default_value_t = 1)]
    pub pixels_per_patch: usize,
    /// Write simulated logits whose uncertainty is this much higher on OoD pixels.
    #[arg(long)]
    pub logit_signal: Option<f64>,
    #[arg(long, default_value_t = 19)]
    pub logit_classes: usize,
    /// Also write an analytic-oracle checkpoint to `<out>/oracle`.
    #[arg(long)]
    pub oracle: bool,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Benchmark split with `features/` and `masks/` subdirectories.
    #[arg(long)]
    pub bench: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated score kinds.
    #[arg(long, default_value = "directional,mse-score,mse-recon", value_delimiter = ',')]
    pub kinds: Vec<String>,
    #[arg(long, default_value = "1..25", value_parser = parse_timesteps)]
    pub timesteps: Timesteps,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[command(flatten)]
    pub common: Common,
}

/// Parsed `--timesteps` value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timesteps(pub Vec<usize>);

/// `a..b` (inclusive), a comma list, or a single timestep.
pub fn parse_timesteps(s: &str) -> std::result::Result<Timesteps, String> {
    let bad = || format!("expected a timestep, `a..b` or a comma list, got {s:?}");
    let ts: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(format!("empty timestep range {s:?}"));
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<std::result::Result<_, _>>()?
    };
    if ts.contains(&0) {
        return Err("timesteps start at 1".into());
    }
    Ok(Timesteps(ts))
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => 2,
        Error::Numerical(_) => 4,
        _ => 3,
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("dood: error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Stats(a) => cmd_stats(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn execution(threads: usize) -> Execution {
    if threads == 1 {
        return Execution::Sequential;
    }
    #[cfg(feature = "parallel")]
    if threads > 1 {
        // The global pool can only be set once per process; later calls keep it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Execution::default()
}

/// Key-value record of one invocation.
struct RunManifest {
    command: &'static str,
    started: Instant,
    entries: Vec<(String, String)>,
}

impl RunManifest {
    fn new(command: &'static str, common: &Common) -> Self {
        let mut m = Self {
            command,
            started: Instant::now(),
            entries: Vec::new(),
        };
        m.set("seed", common.seed);
        m.set("threads", common.threads);
        m
    }

    fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    fn path(&mut self, key: &str, p: &Path) {
        self.set(key, p.display());
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut s = format!("command={}\nversion={VERSION}\n", self.command);
        for (k, v) in &self.entries {
            s.push_str(&format!("{k}={v}\n"));
        }
        s.push_str(&format!("duration_s={:.3}\n", self.started.elapsed().as_secs_f64()));
        write_text(&dir.join(RUN_MANIFEST), &s)
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, s: &str) -> Result<()> {
    fs::write(p, s).map_err(|e| Error::io(p, e))
}

/// `.dtf` files of a directory, sorted by stem. A file path yields itself.
fn list_dtf(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if path.is_file() {
        return Ok(vec![(stem(path), path.to_path_buf())]);
    }
    let rd = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(path, e))?.path();
        if p.is_file() && p.extension().is_some_and(|x| x == "dtf") {
            out.push((stem(&p), p));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Data(format!("no .dtf files in {}", path.display())));
    }
    Ok(out)
}

fn load_maps(path: &Path) -> Result<Vec<(String, FeatureMap)>> {
    list_dtf(path)?
        .into_iter()
        .map(|(s, p)| Ok((s, FeatureMap::from_tensor(read_tensor(&p)?)?)))
        .collect()
}

/// The file in `dir` (or `dir` itself when it is a file) paired with `stem`.
fn paired(dir: &Path, stem: &str) -> Result<PathBuf> {
    if dir.is_file() {
        return Ok(dir.to_path_buf());
    }
    let p = dir.join(format!("{stem}.dtf"));
    if !p.is_file() {
        return Err(Error::Data(format!("no file {} for {stem}", p.display())));
    }
    Ok(p)
}

/// Deterministic per-image noise seed, independent of processing order.
pub fn image_seed(seed: u64, stem: &str) -> u64 {
    derive_seed(seed, &[hash_str(stem)])
}

fn to_pixels(map: &ScoreMap, h: usize, w: usize) -> Result<ScoreMap> {
    if map.height() == h && map.width() == w {
        return ScoreMap::new(h, w, map.values().to_vec(), Resolution::Pixel);
    }
    scorer::upsample_scores(map, h, w)
}

fn fmt_f(v: f64) -> String {
    format!("{v:.10}")
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let mut rm = RunManifest::new("stats", &a.common);
    rm.path("features", &a.features);
    rm.set("norm", &a.norm);
    let kind = NormKind::parse(&a.norm)?;
    let maps = load_maps(&a.features)?;
    let stats = compute_stats(maps.iter().map(|(_, m)| m), kind)?;
    create_dir(&a.out)?;
    let mut s = String::from("channel\tmin\tmax\tmean\tstd\n");
    for c in 0..stats.channels() {
        s.push_str(&format!(
            "{c}\t{}\t{}\t{}\t{}\n",
            stats.per_channel_min[c], stats.per_channel_max[c], stats.per_channel_mean[c], stats.per_channel_std[c]
        ));
    }
    let report = a.out.join("stats.tsv");
    write_text(&report, &s)?;
    rm.set("maps", maps.len());
    rm.path("output", &report);
    rm.write(&a.out)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let exec = execution(a.common.threads);
    let mut rm = RunManifest::new("train", &a.common);
    rm.path("features", &a.features);
    let kind = NormKind::parse(&a.norm)?;
    let sched = a.schedule.build()?;
    let named = load_maps(&a.features)?;
    let maps: Vec<FeatureMap> = named.iter().map(|(_, m)| m.clone()).collect();
    let set = TrainingSet::from_maps(&maps, kind)?;
    let c = set.channels();
    let mut net = DenoiserConfig::with_hidden(c, a.hidden_dim.unwrap_or(c), a.blocks);
    if let Some(g) = a.groups {
        net.groupnorm_groups = g;
    }
    net.validate()?;
    let cfg = TrainConfig {
        iterations: a.iterations,
        batch_size: a.batch_size,
        seed: a.common.seed,
        adam: AdamConfig {
            learning_rate: a.learning_rate,
            ..AdamConfig::default()
        },
    };
    for (k, v) in [
        ("iterations", a.iterations.to_string()),
        ("batch_size", a.batch_size.to_string()),
        ("learning_rate", a.learning_rate.to_string()),
        ("hidden_dim", net.hidden_dim.to_string()),
        ("blocks", a.blocks.to_string()),
        ("groups", net.groupnorm_groups.to_string()),
        ("norm", a.norm.clone()),
        ("diffusion_steps", a.schedule.diffusion_steps.to_string()),
        ("beta_start", a.schedule.beta_start.to_string()),
        ("beta_end", a.schedule.beta_end.to_string()),
        ("score_stats", a.score_stats.to_string()),
    ] {
        rm.set(k, v);
    }
    let log_every = a.log_every;
    let result = trainer::train(&set, &cfg, &sched, &net, exec, |it, loss| {
        if log_every > 0 && (it + 1) % log_every == 0 {
            eprintln!("iteration {}\tloss {loss:.6}", it + 1);
        }
    })?;
    let mut stats = result.stats.clone();
    if a.score_stats {
        let logits = match &a.logits {
            None => None,
            Some(dir) => {
                rm.path("logits", dir);
                Some(
                    named
                        .iter()
                        .map(|(s, _)| read_tensor(paired(dir, s)?))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        };
        let score_cfg = ScoreConfig {
            timesteps: a.timesteps.0.clone(),
            noise_seed: a.common.seed,
            ..ScoreConfig::default()
        };
        rm.set("timesteps", join(&a.timesteps.0));
        stats.scores = Some(trainer::compute_score_standardization(
            &maps,
            &result.params,
            &sched,
            &score_cfg,
            &stats,
            logits.as_deref(),
            exec,
        )?);
    }
    let ck = Checkpoint {
        model: Model::Mlp(result.params.clone()),
        stats,
        schedule: sched,
        train: Some(cfg),
    };
    save_checkpoint(&ck, &a.out)?;
    if !result.loss_trace.is_empty() {
        write_tensor(a.out.join("loss.dtf"), &result.loss_tensor()?)?;
        rm.set("final_loss", result.loss_trace.last().copied().unwrap_or(f32::NAN));
    }
    rm.path("output", &a.out);
    rm.write(&a.out)
}

fn join(ts: &[usize]) -> String {
    ts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let exec = execution(a.common.threads);
    let mut rm = RunManifest::new("score", &a.common);
    rm.path("checkpoint", &a.checkpoint);
    rm.path("features", &a.features);
    rm.set("timesteps", join(&a.timesteps.0));
    rm.set("score_kind", &a.score_kind);
    rm.set("samples", a.samples);
    rm.set("upsample", a.upsample);
    if a.upsample == 0 {
        return Err(Error::invalid("--upsample must be >= 1"));
    }
    let kind = ScoreKind::parse(&a.score_kind)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let base = ScoreConfig {
        timesteps: a.timesteps.0.clone(),
        kind,
        noise_seed: a.common.seed,
        samples_per_timestep: a.samples,
    };
    base.validate(&ck.schedule)?;
    let compound_std = match &a.logits {
        None => None,
        Some(dir) => {
            rm.path("logits", dir);
            let s = ck.stats.scores.filter(|s| s.uncertainty.is_some()).ok_or_else(|| {
                Error::Data("checkpoint has no uncertainty standardization; train with --score-stats --logits".into())
            })?;
            Some(s)
        }
    };
    let model = ck.predictor()?;
    let maps = load_maps(&a.features)?;
    let dirs = ["patch", "pixel"].map(|d| a.out.join(d));
    for d in &dirs {
        create_dir(d)?;
    }
    let mut report = String::from("image\theight\twidth\tdegenerate\n");
    for (stem, fmap) in &maps {
        let cfg = ScoreConfig {
            noise_seed: image_seed(a.common.seed, stem),
            ..base.clone()
        };
        let patch = scorer::score_feature_map(fmap, &model, &ck.schedule, &cfg, &ck.stats, exec)?;
        let file = format!("{stem}.dtf");
        write_tensor(dirs[0].join(&file), &patch.to_tensor())?;
        let (ph, pw) = match &a.logits {
            Some(dir) => {
                let l = read_tensor(paired(dir, stem)?)?;
                let unc = scorer::logsumexp_uncertainty(&l)?;
                let (h, w) = (unc.height(), unc.width());
                let diff = to_pixels(&patch, h, w)?;
                let std = compound_std.as_ref().expect("checked above");
                let comp = scorer::compound(&diff, &unc, std)?;
                for (d, m) in [("uncertainty", &unc), ("compound", &comp)] {
                    create_dir(&a.out.join(d))?;
                    write_tensor(a.out.join(d).join(&file), &m.to_tensor())?;
                }
                (h, w)
            }
            None => (patch.height() * a.upsample, patch.width() * a.upsample),
        };
        let pixel = to_pixels(&patch, ph, pw)?;
        write_tensor(dirs[1].join(&file), &pixel.to_tensor())?;
        if a.heatmap {
            create_dir(&a.out.join("heatmap"))?;
            write_tensor(a.out.join("heatmap").join(&file), &pixel.heatmap())?;
        }
        report.push_str(&format!("{stem}\t{}\t{}\t{}\n", patch.height(), patch.width(), patch.degenerate));
    }
    write_text(&a.out.join("score_report.tsv"), &report)?;
    rm.set("maps", maps.len());
    rm.path("output", &a.out);
    rm.write(&a.out)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut rm = RunManifest::new("eval", &a.common);
    rm.path("scores", &a.scores);
    rm.path("masks", &a.masks);
    let files = list_dtf(&a.scores)?;
    let mut images = Vec::with_capacity(files.len());
    let mut s = String::from("image\tap\tfpr95\tn_pos\tn_neg\tn_ignored\n");
    for (stem, p) in &files {
        let map = ScoreMap::from_tensor(&read_tensor(p)?, Resolution::Pixel)?;
        let mask = OodMask::from_tensor(&read_tensor(paired(&a.masks, stem)?)?)?;
        let img = ImagePixels::new(&map, &mask)?;
        match img.evaluate() {
            Ok(r) => s.push_str(&format!(
                "{stem}\t{}\t{}\t{}\t{}\t{}\n",
                fmt_f(r.ap),
                fmt_f(r.fpr95),
                r.n_pos,
                r.n_neg,
                r.n_ignored
            )),
            // single-class images still count towards the pooled result
            Err(Error::Data(_)) => s.push_str(&format!("{stem}\t-\t-\t-\t-\t-\n")),
            Err(e) => return Err(e),
        }
        images.push(img);
    }
    let mut pool = PooledEval::new();
    for img in &images {
        pool.push(img);
    }
    let r = pool.finish()?;
    s.push_str(&format!(
        "pooled\t{}\t{}\t{}\t{}\t{}\n",
        fmt_f(r.ap),
        fmt_f(r.fpr95),
        r.n_pos,
        r.n_neg,
        r.n_ignored
    ));
    if a.bootstrap_folds > 0 {
        rm.set("bootstrap_folds", a.bootstrap_folds);
        rm.set("bootstrap_fraction", a.bootstrap_fraction);
        let b = bootstrap(&images, a.bootstrap_folds, a.bootstrap_fraction, a.common.seed)?;
        s.push_str(&format!("bootstrap_mean\t{}\t{}\t-\t-\t-\n", fmt_f(b.ap.mean), fmt_f(b.fpr95.mean)));
        s.push_str(&format!("bootstrap_std\t{}\t{}\t-\t-\t-\n", fmt_f(b.ap.std), fmt_f(b.fpr95.std)));
    }
    create_dir(&a.out)?;
    let report = a.out.join("eval_report.tsv");
    write_text(&report, &s)?;
    rm.set("images", images.len());
    rm.path("output", &report);
    rm.write(&a.out)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let exec = execution(a.common.threads);
    let mut rm = RunManifest::new("synth", &a.common);
    let mut sb = StandardBenchmark {
        dim: a.dim,
        spacing: a.spacing,
        ood_distance: a.ood_distance,
        inlier_std: a.inlier_std,
        n_train_maps: a.n_train_maps,
        ..StandardBenchmark::default()
    };
    sb.bench.n_maps = a.n_maps;
    sb.bench.height = a.height;
    sb.bench.width = a.width;
    sb.bench.ood_fraction = a.ood_fraction;
    sb.bench.pixels_per_patch = a.pixels_per_patch;
    let (spec, ood_mean) = sb.mixture()?;
    let (train, test) = sb.generate(a.common.seed, exec)?;
    let dirs = ["train/features", "test/features", "test/masks"].map(|d| a.out.join(d));
    for d in &dirs {
        create_dir(d)?;
    }
    let name = |i: usize| format!("map_{i:04}.dtf");
    for (i, m) in train.iter().enumerate() {
        write_tensor(dirs[0].join(name(i)), &m.to_tensor())?;
    }
    for (i, (m, k)) in test.maps.iter().zip(&test.masks).enumerate() {
        write_tensor(dirs[1].join(name(i)), &m.to_tensor())?;
        write_tensor(dirs[2].join(name(i)), &k.to_tensor())?;
    }
    if let Some(signal) = a.logit_signal {
        rm.set("logit_signal", signal);
        rm.set("logit_classes", a.logit_classes);
        let (hp, wp) = (a.height * a.pixels_per_patch, a.width * a.pixels_per_patch);
        let inlier = OodMask::new(hp, wp, vec![0; hp * wp])?;
        for (split, masks) in [("train", vec![inlier; train.len()]), ("test", test.masks.clone())] {
            let dir = a.out.join(split).join("logits");
            create_dir(&dir)?;
            for (i, m) in masks.iter().enumerate() {
                let mut rng = stream(a.common.seed, &[2, (split == "test") as u64, i as u64]);
                write_tensor(dir.join(name(i)), &simulated_logits(m, a.logit_classes, signal, &mut rng)?)?;
            }
        }
    }
    let mut s = format!(
        "dim={}\nspacing={}\nood_distance={}\ninlier_std={}\nn_train_maps={}\nn_maps={}\nheight={}\nwidth={}\nood_fraction={}\npixels_per_patch={}\ncomponents={}\n",
        a.dim,
        a.spacing,
        a.ood_distance,
        a.inlier_std,
        a.n_train_maps,
        a.n_maps,
        a.height,
        a.width,
        a.ood_fraction,
        a.pixels_per_patch,
        spec.components().len()
    );
    let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    for (k, c) in spec.components().iter().enumerate() {
        s.push_str(&format!("component.{k}.weight={}\n", c.weight));
        s.push_str(&format!("component.{k}.mean={}\n", list(&c.mean)));
        s.push_str(&format!("component.{k}.cov_diag={}\n", list(&c.cov_diag)));
    }
    s.push_str(&format!("ood_mean={}\n", list(&ood_mean)));
    write_text(&a.out.join("spec.txt"), &s)?;
    if a.oracle {
        let stats = compute_stats(&train, NormKind::MinMax)?;
        let ck = Checkpoint {
            model: Model::Oracle(spec),
            stats,
            schedule: a.schedule.build()?,
            train: None,
        };
        save_checkpoint(&ck, a.out.join("oracle"))?;
        rm.set("oracle", a.out.join("oracle").display());
    }
    rm.set("dim", a.dim);
    rm.set("n_maps", a.n_maps);
    rm.set("n_train_maps", a.n_train_maps);
    rm.set("inlier_std", a.inlier_std);
    rm.path("output", &a.out);
    rm.write(&a.out)
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let exec = execution(a.common.threads);
    let mut rm = RunManifest::new("ablate", &a.common);
    rm.path("bench", &a.bench);
    rm.path("checkpoint", &a.checkpoint);
    rm.set("kinds", a.kinds.join(","));
    rm.set("timesteps", join(&a.timesteps.0));
    rm.set("samples", a.samples);
    let kinds: Vec<ScoreKind> = a.kinds.iter().map(|k| ScoreKind::parse(k.trim())).collect::<Result<_>>()?;
    if kinds.is_empty() {
        return Err(Error::invalid("no score kinds given"));
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    for &t in &a.timesteps.0 {
        ck.schedule.check(t)?;
    }
    let model = ck.predictor()?;
    let maps = load_maps(&a.bench.join("features"))?;
    let masks: Vec<OodMask> = maps
        .iter()
        .map(|(s, _)| OodMask::from_tensor(&read_tensor(paired(&a.bench.join("masks"), s)?)?))
        .collect::<Result<_>>()?;
    let nt = a.timesteps.0.len();
    let mut pools: Vec<PooledEval> = (0..kinds.len() * nt).map(|_| PooledEval::new()).collect();
    let mut aggregated = PooledEval::new();
    let pixels = |m: &ScoreMap, mask: &OodMask| to_pixels(m, mask.height(), mask.width());
    for ((stem, fmap), mask) in maps.iter().zip(&masks) {
        let seed = image_seed(a.common.seed, stem);
        let mut directional = None;
        for (ki, &kind) in kinds.iter().enumerate() {
            let cfg = ScoreConfig {
                timesteps: a.timesteps.0.clone(),
                kind,
                noise_seed: seed,
                samples_per_timestep: a.samples,
            };
            let per_t = scorer::timestep_maps(fmap, &model, &ck.schedule, &cfg, &ck.stats, exec)?;
            for (ti, (_, m)) in per_t.iter().enumerate() {
                pools[ki * nt + ti].push_map(&pixels(m, mask)?, mask)?;
            }
            if kind == ScoreKind::Directional {
                directional = Some(per_t);
            }
        }
        let per_t = match directional {
            Some(p) => p,
            None => {
                let cfg = ScoreConfig {
                    timesteps: a.timesteps.0.clone(),
                    kind: ScoreKind::Directional,
                    noise_seed: seed,
                    samples_per_timestep: a.samples,
                };
                scorer::timestep_maps(fmap, &model, &ck.schedule, &cfg, &ck.stats, exec)?
            }
        };
        let (h, w) = (fmap.height(), fmap.width());
        let values: Vec<(usize, Vec<f32>)> = per_t.into_iter().map(|(t, m)| (t, m.values().to_vec())).collect();
        let agg = ScoreMap::new(h, w, scorer::aggregate(&values, &ck.schedule)?, Resolution::Patch)?;
        aggregated.push_map(&pixels(&agg, mask)?, mask)?;
    }
    let mut s = String::from("kind\ttimestep\tap\tfpr95\n");
    let mut curve = Vec::with_capacity(pools.len());
    for (ki, kind) in kinds.iter().enumerate() {
        for (ti, t) in a.timesteps.0.iter().enumerate() {
            let r = pools[ki * nt + ti].finish()?;
            curve.push(r.ap as f32);
            s.push_str(&format!("{}\t{t}\t{}\t{}\n", kind.as_str(), fmt_f(r.ap), fmt_f(r.fpr95)));
        }
    }
    let r = aggregated.finish()?;
    s.push_str(&format!("directional\taggregated\t{}\t{}\n", fmt_f(r.ap), fmt_f(r.fpr95)));
    create_dir(&a.out)?;
    write_text(&a.out.join("ablate.tsv"), &s)?;
    write_tensor(a.out.join("ap_curve.dtf"), &DenseTensor::from_f32(vec![kinds.len(), nt], curve)?)?;
    rm.set("maps", maps.len());
    rm.path("output", &a.out);
    rm.write(&a.out)
}
