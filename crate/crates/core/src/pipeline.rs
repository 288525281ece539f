//! Training, ensemble sampling, evaluation and ablation runs built from the
//! lower-level modules.

use crate::cli::{write_checkpoint, RunConfig};
use crate::data::{stack_normalized, RadarSequence};
use crate::diffusion::{reverse_step_clipped, train_loss, NoiseSchedule};
use crate::metrics::{token_rows, token_similarity, ForecastCase, MetricsReport, SimilarityMatrix, SimilarityMode};
use crate::model::{Checkpoint, CheckpointError, Model, Variant};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Graph, Tensor};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Total optimizer steps of the run.
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 1e-4,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub ensemble: usize,
    /// Respaced chain length; 0 runs the full schedule.
    pub steps: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            ensemble: 4,
            steps: 0,
            seed: 0,
        }
    }
}

const STEP_KEY: &str = "resume.step";
const RNG_KEY: &str = "resume.rng_word_pos";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// Model, optimizer and data RNG of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: RunConfig,
    pub model: Model,
    opt: Adam,
    sched: NoiseSchedule,
    rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let model = Model::new(cfg.model.clone(), &mut rng)?;
        let opt = Adam::new(adam_config(cfg), model.params());
        Ok(Self {
            cfg: cfg.clone(),
            model,
            opt,
            sched: cfg.diffusion.schedule()?,
            rng,
            step: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    pub fn set_total_steps(&mut self, steps: u64) {
        self.cfg.train.steps = steps;
    }

    /// Draws `batch` random `F`-frame windows, normalized, `(B, F, H, W)`.
    pub fn draw_batch(&mut self, seqs: &[RadarSequence]) -> Result<Tensor> {
        let f = self.cfg.model.frames();
        let usable: Vec<&RadarSequence> = seqs.iter().filter(|s| s.frames() >= f).collect();
        if usable.is_empty() {
            return Err(Error::Param(format!("no training sequence has the {f} frames a window needs")));
        }
        let mut windows = Vec::with_capacity(self.cfg.train.batch);
        for _ in 0..self.cfg.train.batch {
            let s = usable[self.rng.random_range(0..usable.len())];
            let start = self.rng.random_range(0..=s.frames() - f);
            windows.push(s.window(start, f)?);
        }
        let refs: Vec<&RadarSequence> = windows.iter().collect();
        stack_normalized(&refs, &self.cfg.normalizer()?)
    }

    /// One optimizer step on a `(B, F, H, W)` normalized batch.
    pub fn step_on(&mut self, batch: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let loss = train_loss(&self.model, &mut g, batch, self.cfg.model.cond_frames, &self.sched, &mut self.rng)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Param(format!("loss became {value} at step {}", self.step + 1)));
        }
        let grads = g.backward(loss)?;
        self.opt.update(self.model.params_mut(), &grads);
        self.step += 1;
        Ok(value)
    }

    /// Trains until the configured total step count, reporting each loss.
    pub fn train(&mut self, seqs: &[RadarSequence], mut on_step: impl FnMut(&Self, f64) -> Result<()>) -> Result<Vec<(u64, f64)>> {
        let mut log = Vec::new();
        while self.step < self.cfg.train.steps {
            let batch = self.draw_batch(seqs)?;
            let loss = self.step_on(&batch)?;
            log.push((self.step, loss));
            on_step(self, loss)?;
        }
        Ok(log)
    }

    /// Run config, parameters, Adam moments, step and RNG position.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        ck.config = self.cfg.to_kv();
        ck.config.push((STEP_KEY.into(), self.step.to_string()));
        ck.config.push((RNG_KEY.into(), self.rng.get_word_pos().to_string()));
        let (m, v) = self.opt.moments();
        let names = self.model.params().names();
        for (name, t) in names.iter().zip(m) {
            ck.tensors.push((format!("{ADAM_M}{name}"), t.clone()));
        }
        for (name, t) in names.iter().zip(v) {
            ck.tensors.push((format!("{ADAM_V}{name}"), t.clone()));
        }
        ck
    }

    /// Restores a run so that continuing it matches an uninterrupted run.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let (mut step, mut word_pos) = (0u64, 0u128);
        for (k, v) in &ck.config {
            let bad = |_| CheckpointError::Malformed(format!("`{k}` value `{v}`"));
            match k.as_str() {
                STEP_KEY => step = v.parse().map_err(bad)?,
                RNG_KEY => word_pos = v.parse().map_err(bad)?,
                _ => cfg.set(k, v)?,
            }
        }
        cfg.validate()?;
        let model = Model::from_checkpoint(ck)?;
        let mut opt = Adam::new(adam_config(&cfg), model.params());
        let names = model.params().names();
        let fetch = |prefix: &str| -> Result<Vec<Tensor>> {
            names
                .iter()
                .map(|n| {
                    ck.tensor(&format!("{prefix}{n}"))
                        .cloned()
                        .ok_or_else(|| CheckpointError::Mismatch(format!("missing optimizer state for `{n}`")).into())
                })
                .collect()
        };
        let has_state = ck.tensor(&format!("{ADAM_M}{}", names[0])).is_some();
        if has_state {
            opt.restore(step, fetch(ADAM_M)?, fetch(ADAM_V)?)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_word_pos(word_pos);
        Ok(Self {
            sched: cfg.diffusion.schedule()?,
            cfg,
            model,
            opt,
            rng,
            step,
        })
    }
}

fn adam_config(cfg: &RunConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.train.lr,
        ..AdamConfig::default()
    }
}

/// Trains with a `loss.csv` log (appended when resuming) and periodic
/// checkpoints; always leaves `checkpoint.dtca` holding the final state.
pub fn train_to_dir(trainer: &mut Trainer, seqs: &[RadarSequence], out: &Path) -> Result<Vec<(u64, f64)>> {
    std::fs::create_dir_all(out)?;
    let log_path = out.join("loss.csv");
    let fresh = trainer.step() == 0 || !log_path.exists();
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&log_path)?;
    if fresh {
        writeln!(log, "step,loss")?;
    }
    let every = trainer.config().train.checkpoint_every;
    let losses = trainer.train(seqs, |t, loss| {
        writeln!(log, "{},{loss}", t.step())?;
        if every > 0 && t.step() % every == 0 {
            write_checkpoint(out, &format!("checkpoint_{:06}.dtca", t.step()), &t.to_checkpoint())?;
        }
        Ok(())
    })?;
    write_checkpoint(out, "checkpoint.dtca", &trainer.to_checkpoint())?;
    Ok(losses)
}

/// Chain schedule and per-step model timesteps for the sampling config.
pub fn sampling_chain(cfg: &RunConfig) -> Result<(NoiseSchedule, Vec<usize>)> {
    let full = cfg.diffusion.schedule()?;
    if cfg.sample.steps == 0 || cfg.sample.steps == full.steps() {
        let t = (1..=full.steps()).collect();
        Ok((full, t))
    } else {
        full.respaced(cfg.sample.steps)
    }
}

/// Member `k`'s noise stream: the sampling seed on stream `k`.
fn member_rng(seed: u64, member: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(member as u64);
    r
}

/// Ensemble forecast from `F_c` condition frames. The predicted clean sample
/// is clamped to the normalized range at every step. Members run as one batch;
/// each draws noise from its own stream, so member `k` depends only on the
/// seed, `k` and the ensemble size.
pub fn sample_members(model: &Model, cond: &RadarSequence, cfg: &RunConfig) -> Result<Vec<RadarSequence>> {
    let mc = model.config();
    if cond.frames() != mc.cond_frames || cond.height() != mc.height || cond.width() != mc.width {
        return Err(Error::Param(format!(
            "conditions are {}x{}x{}, model expects {}x{}x{}",
            cond.frames(),
            cond.height(),
            cond.width(),
            mc.cond_frames,
            mc.height,
            mc.width
        )));
    }
    let m = cfg.sample.ensemble;
    let norm = cfg.normalizer()?;
    let c: Tensor = norm.normalize(cond);
    let reps: Vec<&Tensor> = std::iter::repeat_n(&c, m).collect();
    let cond_b = Tensor::concat(&reps, 0)?.reshape(&[m, mc.cond_frames, mc.height, mc.width])?;
    let member_shape = [mc.pred_frames, mc.height, mc.width];
    let mut rngs: Vec<ChaCha8Rng> = (0..m).map(|k| member_rng(cfg.sample.seed, k)).collect();
    let mut xs: Vec<Tensor> = rngs.iter_mut().map(|r| Tensor::randn(&member_shape, 1.0, r)).collect();
    let (chain, model_t) = sampling_chain(cfg)?;
    for k in (1..=chain.steps()).rev() {
        let refs: Vec<&Tensor> = xs.iter().collect();
        let xb = Tensor::concat(&refs, 0)?.reshape(&[m, mc.pred_frames, mc.height, mc.width])?;
        let eps = model.predict(&cond_b, &xb, &vec![model_t[k - 1]; m])?;
        for (i, (x, r)) in xs.iter_mut().zip(rngs.iter_mut()).enumerate() {
            let e = eps.narrow(0, i, 1)?.reshape(&member_shape)?;
            let z = if k > 1 { Tensor::randn(&member_shape, 1.0, r) } else { Tensor::zeros(&member_shape) };
            *x = reverse_step_clipped(x, &e, k, &z, &chain, 1.0)?;
        }
    }
    xs.iter()
        .map(|x| {
            let mut s = norm.denormalize(x)?;
            s.timestep_minutes = cond.timestep_minutes;
            Ok(s)
        })
        .collect()
}

/// Model and persistence scores over `F`-frame evaluation windows.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub model: MetricsReport,
    pub persistence: MetricsReport,
    pub forecasts: Vec<ForecastCase>,
}

pub fn evaluate(model: &Model, windows: &[RadarSequence], cfg: &RunConfig) -> Result<Evaluation> {
    let (fc, fnp) = (model.config().cond_frames, model.config().pred_frames);
    let mut cases = Vec::with_capacity(windows.len());
    let mut persist = Vec::with_capacity(windows.len());
    for w in windows {
        if w.frames() != fc + fnp {
            return Err(Error::Param(format!("evaluation window has {} frames, need {}", w.frames(), fc + fnp)));
        }
        let truth = w.window(fc, fnp)?;
        let members = sample_members(model, &w.window(0, fc)?, cfg)?;
        persist.push(ForecastCase {
            members: vec![w.persistence(fc, fnp)?],
            truth: truth.clone(),
        });
        cases.push(ForecastCase { members, truth });
    }
    Ok(Evaluation {
        model: MetricsReport::evaluate(&cases, &cfg.eval)?,
        persistence: MetricsReport::evaluate(&persist, &cfg.eval)?,
        forecasts: cases,
    })
}

/// Spatial (`C × C`) and temporal (`F × F`) self-similarity of the
/// observed window's tokens, and the `F_n × F_n` similarity between
/// forecast and observed prediction-frame tokens.
pub fn token_analysis(model: &Model, window: &RadarSequence, forecast: &RadarSequence, cfg: &RunConfig) -> Result<Vec<(String, SimilarityMatrix)>> {
    let mc = model.config();
    let (c, f, n) = (model.grid().tokens(), mc.frames(), mc.embed_dim);
    let norm = cfg.normalizer()?;
    let obs: Tensor = norm.normalize(window);
    let obs = obs.reshape(&[1, f, mc.height, mc.width])?;
    let cond = obs.narrow(1, 0, mc.cond_frames)?;
    let observed = obs.narrow(1, mc.cond_frames, mc.pred_frames)?;
    let pred: Tensor = norm.normalize(forecast);
    let pred = pred.reshape(&[1, mc.pred_frames, mc.height, mc.width])?;

    let t_obs_tensor = model.input_tokens(&cond, &observed)?;
    let t_obs = t_obs_tensor.to_f64_vec();
    let t_pred = model.input_tokens(&cond, &pred)?;

    let (rows, w) = token_rows(&t_obs, c, f, n, SimilarityMode::Spatial)?;
    let spatial = token_similarity(&rows, &rows, w)?;
    let (rows, w) = token_rows(&t_obs, c, f, n, SimilarityMode::Temporal)?;
    let temporal = token_similarity(&rows, &rows, w)?;

    let slice = |t: &Tensor| -> Result<Vec<f64>> {
        Ok(t.narrow(2, mc.cond_frames, mc.pred_frames)?.to_f64_vec())
    };
    let (ra, w) = token_rows(&slice(&t_pred)?, c, mc.pred_frames, n, SimilarityMode::Temporal)?;
    let (rb, _) = token_rows(&slice(&t_obs_tensor)?, c, mc.pred_frames, n, SimilarityMode::Temporal)?;
    let cross = token_similarity(&ra, &rb, w)?;
    Ok(vec![
        ("spatial".into(), spatial),
        ("temporal".into(), temporal),
        ("prediction_vs_observed".into(), cross),
    ])
}

/// The ablation axes: every variant at the base shift, shifts 0/4/8/16 at
/// the base variant, and the cross path disabled.
pub fn ablation_grid(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut out = Vec::new();
    for v in Variant::ALL {
        let mut c = base.clone();
        c.model.variant = v;
        out.push((format!("variant={v}"), c));
    }
    for s in [0, 4, 8, 16] {
        let mut c = base.clone();
        c.model.shift = s;
        c.model.causal = true;
        out.push((format!("shift={s}"), c));
    }
    let mut c = base.clone();
    c.model.causal = false;
    out.push(("causal=off".into(), c));
    out
}

/// Median of a slice; NaN when empty.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}
