//! Run configuration and the command-line verbs.
//!
//! A run is described by one flat `key=value` file. Unknown keys are
//! rejected, `--set key=value` overrides apply on top, and every verb writes
//! the fully resolved configuration next to its outputs.

use crate::data::{gen_synthetic, BlobParams, Normalizer, RadarSequence};
use crate::metrics::{radial_psd, token_rows, token_similarity, EvalConfig, ForecastCase, MetricsReport, SimilarityMode};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, Model};
use crate::pipeline::{self, DiffusionConfig, SampleConfig, TrainConfig, Trainer};
use crate::tensor::Tensor;
use crate::tokenizer::PatchGrid;
use crate::{Error, Result};
use clap::{Parser, Subcommand};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error as ThisError;

#[derive(Debug, ThisError, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("config line {line}: expected `key=value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("config key `{key}`: cannot use `{value}` ({reason})")]
    BadValue { key: String, value: String, reason: String },
}

/// Data generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Frames per generated sequence.
    pub seq_frames: usize,
    pub cap_mmh: f64,
    pub timestep_minutes: f32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seq_frames: 12,
            cap_mmh: 32.0,
            timestep_minutes: 5.0,
        }
    }
}

/// Every setting a verb may need.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub blobs: BlobParams,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

fn bad(key: &str, value: &str, reason: impl Into<String>) -> Error {
    ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
    .into()
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad(key, value, "not a valid number"))
}

impl RunConfig {
    /// Resolved `key=value` pairs in a fixed order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = self.model.to_kv();
        let mut push = |k: &str, v: String| kv.push((k.to_string(), v));
        push("diffusion_steps", self.diffusion.steps.to_string());
        push("beta_start", self.diffusion.beta_start.to_string());
        push("beta_end", self.diffusion.beta_end.to_string());
        let b = &self.blobs;
        push("blob_count", b.count.to_string());
        push("amplitude_min", b.amplitude.0.to_string());
        push("amplitude_max", b.amplitude.1.to_string());
        push("radius_min", b.radius.0.to_string());
        push("radius_max", b.radius.1.to_string());
        push("speed_min", b.speed.0.to_string());
        push("speed_max", b.speed.1.to_string());
        push("heading_min", b.heading.0.to_string());
        push("heading_max", b.heading.1.to_string());
        push("growth", b.growth.to_string());
        push("noise", b.noise.to_string());
        push("seq_frames", self.data.seq_frames.to_string());
        push("cap_mmh", self.data.cap_mmh.to_string());
        push("timestep_minutes", self.data.timestep_minutes.to_string());
        let t = &self.train;
        push("train_steps", t.steps.to_string());
        push("batch", t.batch.to_string());
        push("lr", t.lr.to_string());
        push("seed", t.seed.to_string());
        push("checkpoint_every", t.checkpoint_every.to_string());
        push("ensemble", self.sample.ensemble.to_string());
        push("sample_steps", self.sample.steps.to_string());
        push("sample_seed", self.sample.seed.to_string());
        let th: Vec<String> = self.eval.thresholds.iter().map(f64::to_string).collect();
        push("thresholds", th.join(","));
        push("fss_window", self.eval.fss_window.to_string());
        kv
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.model.set(key, value) {
            Ok(true) => return Ok(()),
            Ok(false) => {}
            Err(Error::Param(reason)) => return Err(bad(key, value, reason)),
            Err(e) => return Err(e),
        }
        let v = value.trim();
        let b = &mut self.blobs;
        match key {
            "diffusion_steps" => self.diffusion.steps = parse(key, v)?,
            "beta_start" => self.diffusion.beta_start = parse(key, v)?,
            "beta_end" => self.diffusion.beta_end = parse(key, v)?,
            "blob_count" => b.count = parse(key, v)?,
            "amplitude_min" => b.amplitude.0 = parse(key, v)?,
            "amplitude_max" => b.amplitude.1 = parse(key, v)?,
            "radius_min" => b.radius.0 = parse(key, v)?,
            "radius_max" => b.radius.1 = parse(key, v)?,
            "speed_min" => b.speed.0 = parse(key, v)?,
            "speed_max" => b.speed.1 = parse(key, v)?,
            "heading_min" => b.heading.0 = parse(key, v)?,
            "heading_max" => b.heading.1 = parse(key, v)?,
            "growth" => b.growth = parse(key, v)?,
            "noise" => b.noise = parse(key, v)?,
            "seq_frames" => self.data.seq_frames = parse(key, v)?,
            "cap_mmh" => self.data.cap_mmh = parse(key, v)?,
            "timestep_minutes" => self.data.timestep_minutes = parse(key, v)?,
            "train_steps" => self.train.steps = parse(key, v)?,
            "batch" => self.train.batch = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            "checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "ensemble" => self.sample.ensemble = parse(key, v)?,
            "sample_steps" => self.sample.steps = parse(key, v)?,
            "sample_seed" => self.sample.seed = parse(key, v)?,
            "thresholds" => {
                self.eval.thresholds = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "fss_window" => self.eval.fss_window = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey { key: key.into() }.into()),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: line.to_string(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Loads `path` (when given) over the defaults, then applies overrides.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut c = Self::default();
        if let Some(p) = path {
            c.apply_text(&std::fs::read_to_string(p)?)?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: 0,
                text: o.clone(),
            })?;
            c.set(k.trim(), v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |key: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Param(reason) => bad(key, "", reason),
                e => e,
            })
        };
        wrap("model", self.model.validate())?;
        wrap("blobs", self.blobs.validate())?;
        wrap("diffusion", self.diffusion.schedule().map(|_| ()))?;
        wrap("cap_mmh", Normalizer::new(self.data.cap_mmh).map(|_| ()))?;
        if self.eval.fss_window % 2 == 0 {
            return Err(bad("fss_window", &self.eval.fss_window.to_string(), "must be odd"));
        }
        if self.eval.thresholds.iter().any(|t| !(*t > 0.0)) {
            return Err(bad("thresholds", "", "thresholds must be positive"));
        }
        if self.train.batch == 0 {
            return Err(bad("batch", "0", "must be positive"));
        }
        if self.sample.ensemble == 0 {
            return Err(bad("ensemble", "0", "must be positive"));
        }
        if self.sample.steps > self.diffusion.steps {
            return Err(bad("sample_steps", &self.sample.steps.to_string(), "exceeds diffusion_steps"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.to_kv().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Writes `config.txt` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), self.to_text())?;
        Ok(())
    }

    pub fn normalizer(&self) -> Result<Normalizer> {
        Normalizer::new(self.data.cap_mmh)
    }
}

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const DATA: i32 = 3;
    pub const INTERNAL: i32 = 4;
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Param(_) | Error::Config(_) | Error::Checkpoint(_) => exit::USAGE,
        Error::Format(_) | Error::Io(_) => exit::DATA,
        Error::Tensor(_) => exit::INTERNAL,
    }
}

#[derive(Debug, Parser)]
#[command(name = "dtca", version, about = "Diffusion transformer nowcasting with causal attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// Flat key=value run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config entry, e.g. `--set variant=S+T`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic rainfall sequences as RSEQ files.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a directory of RSEQ files.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw ensemble forecasts from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// RSEQ file whose frames `offset..offset+F_c` are the conditions.
        #[arg(long)]
        conditions: PathBuf,
        #[arg(long, default_value_t = 0)]
        offset: usize,
        #[arg(long)]
        ensemble: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Respaced chain length; 0 runs every diffusion step.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score forecasts against observations.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory of member RSEQ files; repeat once per case.
        #[arg(long, required = true)]
        forecasts: Vec<PathBuf>,
        /// Observed RSEQ file; repeat once per case, in the same order.
        #[arg(long, required = true)]
        truth: Vec<PathBuf>,
        /// First truth frame matching forecast lead 1.
        #[arg(long, default_value_t = 0)]
        truth_offset: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cosine similarity between the patch tokens of two sequences.
    AnalyzeTokens {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_parser = ["spatial", "temporal"], default_value = "temporal")]
        mode: String,
        /// Embed tokens with this model instead of using raw patches.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Radially averaged power spectrum of a sequence.
    Spectrum {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Sorted `*.rseq` files of a directory.
pub fn rseq_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "rseq"))
        .collect();
    files.sort();
    Ok(files)
}

/// Runs one verb; text written to `log` is meant for stdout.
pub fn run(cli: Cli, log: &mut String) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, out, count, seed } => {
            let cfg = cfg.resolve()?;
            cfg.write_resolved(&out)?;
            for i in 0..count {
                let s = seed.wrapping_add(i as u64);
                let mut seq = gen_synthetic(&cfg.blobs, cfg.data.seq_frames, cfg.model.height, cfg.model.width, s)?;
                seq.timestep_minutes = cfg.data.timestep_minutes;
                seq.save(out.join(format!("seq_{i:05}.rseq")))?;
            }
            let _ = writeln!(log, "wrote {count} sequences to {} (seed {seed})", out.display());
        }
        Command::Train { cfg, data, out, resume } => {
            let cfg = cfg.resolve()?;
            let files = rseq_files(&data)?;
            let seqs = files.iter().map(RadarSequence::load).collect::<Result<Vec<_>>>()?;
            let mut trainer = match resume {
                Some(p) => Trainer::from_checkpoint(&load_checkpoint(p)?)?,
                None => Trainer::new(&cfg)?,
            };
            trainer.set_total_steps(cfg.train.steps);
            let resolved = trainer.config().clone();
            resolved.write_resolved(&out)?;
            let _ = writeln!(log, "training from step {} (seed {})", trainer.step(), resolved.train.seed);
            let losses = pipeline::train_to_dir(&mut trainer, &seqs, &out)?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                let _ = writeln!(log, "step {} loss {:.5} -> step {} loss {:.5}", first.0, first.1, last.0, last.1);
            }
        }
        Command::Sample { checkpoint, conditions, offset, ensemble, seed, steps, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let trainer = Trainer::from_checkpoint(&ck)?;
            let mut cfg = trainer.config().clone();
            if let Some(m) = ensemble {
                cfg.sample.ensemble = m;
            }
            if let Some(s) = seed {
                cfg.sample.seed = s;
            }
            if let Some(s) = steps {
                cfg.sample.steps = s;
            }
            cfg.validate()?;
            cfg.write_resolved(&out)?;
            let seq = RadarSequence::load(&conditions)?;
            let fc = cfg.model.cond_frames;
            if seq.frames() < offset + fc {
                return Err(Error::Param(format!(
                    "conditions file has {} frames, need {fc} condition frames from offset {offset}",
                    seq.frames()
                )));
            }
            let cond = seq.window(offset, fc)?;
            let members = pipeline::sample_members(&trainer.model, &cond, &cfg)?;
            for (k, m) in members.iter().enumerate() {
                m.save(out.join(format!("member_{k:03}.rseq")))?;
            }
            let _ = writeln!(log, "wrote {} members of {} frames (seed {})", members.len(), cfg.model.pred_frames, cfg.sample.seed);
        }
        Command::Eval { cfg, forecasts, truth, truth_offset, out } => {
            let cfg = cfg.resolve()?;
            if forecasts.len() != truth.len() {
                return Err(Error::Param(format!(
                    "{} forecast directories for {} truth files",
                    forecasts.len(),
                    truth.len()
                )));
            }
            let mut cases = Vec::new();
            for (fdir, tpath) in forecasts.iter().zip(&truth) {
                let members = rseq_files(fdir)?
                    .iter()
                    .map(RadarSequence::load)
                    .collect::<Result<Vec<_>>>()?;
                let lead = members.first().map(|m| m.frames()).ok_or_else(|| {
                    Error::Param(format!("no member files in {}", fdir.display()))
                })?;
                let t = RadarSequence::load(tpath)?;
                if t.frames() < truth_offset + lead {
                    return Err(Error::Param(format!(
                        "truth {} has {} frames, forecasts need {lead} from offset {truth_offset}",
                        tpath.display(),
                        t.frames()
                    )));
                }
                cases.push(ForecastCase {
                    members,
                    truth: t.window(truth_offset, lead)?,
                });
            }
            let report = MetricsReport::evaluate(&cases, &cfg.eval)?;
            cfg.write_resolved(&out)?;
            report.write_dir(&out)?;
            log.push_str(&report.summary());
        }
        Command::AnalyzeTokens { a, b, mode, checkpoint, cfg, out } => {
            let cfg = cfg.resolve()?;
            let (sa, sb) = (RadarSequence::load(&a)?, RadarSequence::load(&b)?);
            if (sa.frames(), sa.height(), sa.width()) != (sb.frames(), sb.height(), sb.width()) {
                return Err(Error::Param("token analysis needs sequences of equal shape".into()));
            }
            let mode = if mode == "spatial" { SimilarityMode::Spatial } else { SimilarityMode::Temporal };
            let model = match &checkpoint {
                Some(p) => Some(Trainer::from_checkpoint(&load_checkpoint(p)?)?.model),
                None => None,
            };
            let norm = cfg.normalizer()?;
            let (ta, ca, fa, n) = sequence_tokens(&sa, &norm, cfg.model.patch, model.as_ref())?;
            let (tb, ..) = sequence_tokens(&sb, &norm, cfg.model.patch, model.as_ref())?;
            let (ra, w) = token_rows(&ta, ca, fa, n, mode)?;
            let (rb, _) = token_rows(&tb, ca, fa, n, mode)?;
            let m = token_similarity(&ra, &rb, w)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("similarity.csv"), m.to_csv())?;
            let diag: Vec<String> = m.diagonal().iter().map(f64::to_string).collect();
            std::fs::write(out.join("diagonal.csv"), diag.join("\n") + "\n")?;
            cfg.write_resolved(&out)?;
            let _ = writeln!(log, "global_mean={}", m.global_mean());
            let _ = writeln!(log, "matrix_mean={}", m.matrix_mean());
            if m.zero_norm {
                let _ = writeln!(log, "warning: zero-norm tokens scored as 0");
            }
        }
        Command::Spectrum { input, out } => {
            let seq = RadarSequence::load(&input)?;
            if seq.height() != seq.width() {
                return Err(Error::Param(format!(
                    "spectrum needs a square domain, got {}x{}",
                    seq.height(),
                    seq.width()
                )));
            }
            let mut power: Option<Vec<f64>> = None;
            let mut spec = None;
            for f in 0..seq.frames() {
                let field: Vec<f64> = seq.frame(f).iter().map(|&v| v as f64).collect();
                let s = radial_psd(&field, seq.height())?;
                match &mut power {
                    None => power = Some(s.power.clone()),
                    Some(p) => p.iter_mut().zip(&s.power).for_each(|(a, b)| *a += b),
                }
                spec = Some(s);
            }
            let mut csv = String::from("wavenumber,wavelength,power\n");
            if let (Some(p), Some(s)) = (power, spec) {
                for k in 1..p.len() {
                    if s.count[k] > 0 {
                        let _ = writeln!(csv, "{k},{},{}", s.wavelength(k), p[k] / seq.frames() as f64);
                    }
                }
            }
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&out, csv)?;
            let _ = writeln!(log, "wrote spectrum of {} frames to {}", seq.frames(), out.display());
        }
    }
    Ok(())
}

/// `(C, F, N)` tokens of a whole sequence: raw normalized patches, or the
/// model's embedded and position-tagged tokens when a model is given.
pub fn sequence_tokens(
    seq: &RadarSequence,
    norm: &Normalizer,
    patch: usize,
    model: Option<&Model>,
) -> Result<(Vec<f64>, usize, usize, usize)> {
    let x: Tensor<f32> = norm.normalize(seq);
    match model {
        None => {
            let grid = PatchGrid::new(seq.height(), seq.width(), patch)?;
            let x = x.reshape(&[1, seq.frames(), seq.height(), seq.width()])?;
            let t = grid.patchify(&x)?;
            Ok((t.to_f64_vec(), grid.tokens(), seq.frames(), grid.patch_len()))
        }
        Some(m) => {
            let cfg = m.config();
            if seq.frames() != cfg.frames() {
                return Err(Error::Param(format!(
                    "model tokens need {} frames, sequence has {}",
                    cfg.frames(),
                    seq.frames()
                )));
            }
            let x = x.reshape(&[1, seq.frames(), seq.height(), seq.width()])?;
            let cond = x.narrow(1, 0, cfg.cond_frames)?;
            let pred = x.narrow(1, cfg.cond_frames, cfg.pred_frames)?;
            let t = m.input_tokens(&cond, &pred)?;
            Ok((t.to_f64_vec(), m.grid().tokens(), cfg.frames(), cfg.embed_dim))
        }
    }
}

/// Saves a checkpoint and returns its path; shared by the pipeline.
pub(crate) fn write_checkpoint(dir: &Path, name: &str, ck: &crate::model::Checkpoint) -> Result<PathBuf> {
    let path = dir.join(name);
    save_checkpoint(&path, ck)?;
    Ok(path)
}
