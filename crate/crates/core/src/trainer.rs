//! Training loop: condition dropout, the masked joint loss, Adam,
//! checkpoints with exact resume, and a finite-difference gradient check.
//!
//! All randomness of step `k` comes from a stream keyed by `(seed, k)`, so a
//! run resumed from a saved state replays the same batches, timesteps, noise
//! and dropout decisions as an uninterrupted one.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array2, Axis, Zip};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowfield::{flow_video_for, DEFAULT_SIGMA};
use crate::format::{self, Container};
use crate::jamdit::{backward, forward_tokens, patchify, ModelConfig, ModelParams};
use crate::real::Real;
use crate::synthdata::Item;

pub const LOSS_CSV: &str = "loss.csv";
pub const STATE_FILE: &str = "train_state.vjc";
pub const FINAL_CHECKPOINT: &str = "final.vjc";
pub const LOSS_CSV_HEADER: &str = "step,loss,loss_x,loss_d,dropped_text_frac,dropped_flow_frac";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Appearance-only pretraining.
    #[default]
    Base,
    /// Joint appearance-motion fine-tuning of an extended model.
    Videojam,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(TrainMode::Base),
            "videojam" => Ok(TrainMode::Videojam),
            other => Err(Error::invalid("mode", format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub p_drop_text: f64,
    pub p_drop_flow: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Completed-step interval between periodic checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
    /// `w` in `(L_x + w L_d) / (1 + w)`.
    pub motion_loss_weight: f64,
    pub flow_sigma: f64,
    pub dataset: Option<PathBuf>,
    /// Mode and starting checkpoint, recorded so an echoed config replays the run.
    pub mode: TrainMode,
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 0,
            p_drop_text: 0.3,
            p_drop_flow: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            checkpoint_interval: 500,
            motion_loss_weight: 1.0,
            flow_sigma: DEFAULT_SIGMA,
            dataset: None,
            mode: TrainMode::Base,
            init_checkpoint: None,
        }
    }
}

fn probability(field: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(field, format!("{p} is not a probability")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::invalid("train.steps", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("train.learning_rate", "must be finite and non-negative"));
        }
        probability("train.p_drop_text", self.p_drop_text)?;
        probability("train.p_drop_flow", self.p_drop_flow)?;
        for (name, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(name, "must lie in [0, 1)"));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::invalid("train.epsilon", "must be positive"));
        }
        if !(self.motion_loss_weight >= 0.0 && self.motion_loss_weight.is_finite()) {
            return Err(Error::invalid(
                "train.motion_loss_weight",
                "must be finite and non-negative",
            ));
        }
        if self.flow_sigma.is_nan() || self.flow_sigma <= 0.0 {
            return Err(Error::invalid("train.flow_sigma", "must be positive"));
        }
        Ok(())
    }
}

/// Per-item condition dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DropoutDecision {
    pub drop_text: bool,
    pub drop_flow: bool,
}

/// Independent Bernoulli draws: the class becomes null with `p_text`; the
/// motion input becomes zero, and its loss term is masked, with `p_flow`.
pub fn sample_dropout<R: Rng>(rng: &mut R, p_text: f64, p_flow: f64) -> DropoutDecision {
    let drop_text = rng.random::<f64>() < p_text;
    let drop_flow = rng.random::<f64>() < p_flow;
    DropoutDecision { drop_text, drop_flow }
}

/// A training item in token space: clean video and clean flow-video tokens.
#[derive(Debug, Clone)]
pub struct Example<F> {
    pub x1: Array2<F>,
    pub d1: Array2<F>,
    pub class_id: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingSet<F> {
    pub examples: Vec<Example<F>>,
    /// `(T, H, W, C)` of every item.
    pub dims: (usize, usize, usize, usize),
    pub grid: (usize, usize, usize),
}

impl<F: Real> TrainingSet<F> {
    /// Patchifies videos and their encoded, padded flow videos.
    pub fn new(items: &[Item], model: &ModelConfig, sigma: f64) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("dataset", "no training items"))?;
        let dims = first.video.data.dim();
        if dims.3 != model.in_channels {
            return Err(Error::shape(format!(
                "dataset has {} channels, model expects {}",
                dims.3, model.in_channels
            )));
        }
        let patch = model.patch_size();
        patch.check(dims.0, dims.1, dims.2)?;
        let mut examples = Vec::with_capacity(items.len());
        for it in items {
            if it.video.data.dim() != dims {
                return Err(Error::shape("dataset items differ in shape".to_string()));
            }
            let fv = flow_video_for(&it.flow, sigma)?;
            examples.push(Example {
                x1: patchify(it.video.data.mapv(F::of).view(), patch)?,
                d1: patchify(fv.data.mapv(F::of).view(), patch)?,
                class_id: it.class_id,
            });
        }
        Ok(TrainingSet {
            examples,
            dims,
            grid: patch.grid(dims.0, dims.1, dims.2),
        })
    }
}

/// Everything random about one item's loss evaluation.
#[derive(Debug, Clone)]
pub struct Draw<F> {
    pub x1: Array2<F>,
    pub d1: Array2<F>,
    /// `None` is the null class (text dropped).
    pub class: Option<usize>,
    pub drop_flow: bool,
    pub t: f64,
    pub x0: Array2<F>,
    pub d0: Array2<F>,
    pub grid: (usize, usize, usize),
}

fn randn<F: Real, R: Rng>(rng: &mut R, dim: (usize, usize)) -> Array2<F> {
    Array2::from_shape_simple_fn(dim, || F::of(rng.sample(StandardNormal)))
}

impl<F: Real> Draw<F> {
    /// Fresh noise and timestep for `ex`, no dropout.
    pub fn sample<R: Rng>(rng: &mut R, ex: &Example<F>, grid: (usize, usize, usize)) -> Self {
        let t = rng.random::<f64>();
        let x0 = randn(rng, ex.x1.dim());
        let d0 = randn(rng, ex.d1.dim());
        Draw {
            x1: ex.x1.clone(),
            d1: ex.d1.clone(),
            class: Some(ex.class_id),
            drop_flow: false,
            t,
            x0,
            d0,
            grid,
        }
    }
}

fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The batch of training step `step`: a pure function of `(config.seed, step)`.
pub fn plan_batch<F: Real>(set: &TrainingSet<F>, config: &TrainConfig, joint: bool, step: u64) -> Vec<Draw<F>> {
    let mut rng = step_rng(config.seed, step);
    (0..config.batch_size)
        .map(|_| {
            let ex = &set.examples[rng.random_range(0..set.examples.len())];
            let drop = sample_dropout(
                &mut rng,
                config.p_drop_text,
                if joint { config.p_drop_flow } else { 0.0 },
            );
            let mut d = Draw::sample(&mut rng, ex, set.grid);
            if drop.drop_text {
                d.class = None;
            }
            d.drop_flow = drop.drop_flow;
            d
        })
        .collect()
}

/// Loss terms of one item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemLoss {
    pub loss: f64,
    pub loss_x: f64,
    /// `None` when the model is appearance-only or the flow was dropped.
    pub loss_d: Option<f64>,
}

struct ItemEval<F> {
    loss: ItemLoss,
    d_out: Array2<F>,
    cache: crate::jamdit::ForwardCache<F>,
}

fn lerp<F: Real>(x1: &Array2<F>, x0: &Array2<F>, t: f64) -> Array2<F> {
    let (a, b) = (F::of(t), F::of(1.0 - t));
    Zip::from(x1).and(x0).map_collect(|&p, &q| a * p + b * q)
}

/// Forward pass, loss and output cotangent for one item. The cotangent is
/// for the item loss itself; callers scale it.
fn eval_item<F: Real>(params: &ModelParams<F>, draw: &Draw<F>, motion_weight: f64) -> Result<ItemEval<F>> {
    let td = params.config.token_dim();
    if draw.x1.dim().1 != td || draw.x0.dim() != draw.x1.dim() {
        return Err(Error::shape(format!(
            "draw tokens {:?} do not match the model",
            draw.x1.dim()
        )));
    }
    let x_t = lerp(&draw.x1, &draw.x0, draw.t);
    let tokens = if params.joint_mode {
        let d_t = if draw.drop_flow {
            Array2::zeros(draw.d1.dim())
        } else {
            lerp(&draw.d1, &draw.d0, draw.t)
        };
        concatenate(Axis(1), &[x_t.view(), d_t.view()]).map_err(|e| Error::shape(e.to_string()))?
    } else {
        x_t
    };
    let cls = match draw.class {
        None => params.config.null_class(),
        Some(c) if c < params.config.n_classes => c,
        Some(c) => return Err(Error::invalid("class_id", format!("{c} out of range"))),
    };
    let (out, cache) = forward_tokens(params, tokens, cls, F::of(draw.t), draw.grid);

    let mut d_out = Array2::<F>::zeros(out.dim());
    let n = draw.x1.len() as f64;
    let sq = |pred: ndarray::ArrayView2<'_, F>,
              x1: &Array2<F>,
              x0: &Array2<F>,
              grad: ndarray::ArrayViewMut2<'_, F>,
              scale: f64| {
        let mut acc = 0.0;
        Zip::from(grad).and(pred).and(x1).and(x0).for_each(|g, &p, &a, &b| {
            let r = p - (a - b);
            acc += r.f64() * r.f64();
            *g = F::of(2.0 * scale / n) * r;
        });
        acc / n
    };
    let motion = params.joint_mode && !draw.drop_flow;
    let (ax, ad) = if motion {
        (1.0 / (1.0 + motion_weight), motion_weight / (1.0 + motion_weight))
    } else {
        (1.0, 0.0)
    };
    let loss_x = sq(
        out.slice(s![.., ..td]),
        &draw.x1,
        &draw.x0,
        d_out.slice_mut(s![.., ..td]),
        ax,
    );
    let loss_d = if motion {
        Some(sq(
            out.slice(s![.., td..]),
            &draw.d1,
            &draw.d0,
            d_out.slice_mut(s![.., td..]),
            ad,
        ))
    } else {
        None
    };
    let loss = ax * loss_x + ad * loss_d.unwrap_or(0.0);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss} (t = {}, class {cls}, drop_flow {})",
            draw.t, draw.drop_flow
        )));
    }
    Ok(ItemEval {
        loss: ItemLoss { loss, loss_x, loss_d },
        d_out,
        cache,
    })
}

/// Loss of one item without gradients.
pub fn item_loss<F: Real>(params: &ModelParams<F>, draw: &Draw<F>, motion_weight: f64) -> Result<ItemLoss> {
    Ok(eval_item(params, draw, motion_weight)?.loss)
}

/// Batch loss statistics, one loss-curve row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub loss_x: f64,
    /// Mean over items whose flow was kept; 0 when there are none.
    pub loss_d: f64,
    pub dropped_text_frac: f64,
    pub dropped_flow_frac: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, self.loss_x, self.loss_d, self.dropped_text_frac, self.dropped_flow_frac
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Format(format!("bad loss row {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        let n = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(StepRecord {
            step: f[0].parse().map_err(|_| bad())?,
            loss: n(1)?,
            loss_x: n(2)?,
            loss_d: n(3)?,
            dropped_text_frac: n(4)?,
            dropped_flow_frac: n(5)?,
        })
    }
}

/// Mean batch loss and its parameter gradient.
pub fn loss_and_grad<F: Real>(
    params: &ModelParams<F>,
    draws: &[Draw<F>],
    motion_weight: f64,
) -> Result<(StepRecord, ModelParams<F>)> {
    if draws.is_empty() {
        return Err(Error::invalid("batch", "empty batch"));
    }
    let b = draws.len() as f64;
    let mut grads = params.zeros_like();
    let mut rec = StepRecord {
        step: 0,
        loss: 0.0,
        loss_x: 0.0,
        loss_d: 0.0,
        dropped_text_frac: 0.0,
        dropped_flow_frac: 0.0,
    };
    let mut kept = 0usize;
    for d in draws {
        let mut e = eval_item(params, d, motion_weight)?;
        e.d_out.mapv_inplace(|g| g * F::of(1.0 / b));
        backward(params, &e.cache, &e.d_out, &mut grads);
        rec.loss += e.loss.loss / b;
        rec.loss_x += e.loss.loss_x / b;
        if let Some(ld) = e.loss.loss_d {
            rec.loss_d += ld;
            kept += 1;
        }
        rec.dropped_text_frac += f64::from(u8::from(d.class.is_none())) / b;
        rec.dropped_flow_frac += f64::from(u8::from(params.joint_mode && d.drop_flow)) / b;
    }
    if kept > 0 {
        rec.loss_d /= kept as f64;
    }
    Ok((rec, grads))
}

/// First and second moment estimates, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams<F>, grads: &ModelParams<F>, config: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (b1f, b2f) = (F::of(b1), F::of(b2));
        let (c1, c2) = (F::of(1.0 - b1), F::of(1.0 - b2));
        let step = F::of(config.learning_rate / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(config.epsilon);
        for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = b1f * *m + c1 * g;
                    *v = b2f * *v + c2 * g * g;
                    *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
                });
        }
    }
}

/// In-memory training state.
#[derive(Debug, Clone)]
pub struct Trainer<F> {
    pub params: ModelParams<F>,
    pub opt: AdamState<F>,
    /// Completed steps.
    pub step: usize,
    pub config: TrainConfig,
}

impl<F: Real> Trainer<F> {
    pub fn new(params: ModelParams<F>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = AdamState::new(&params);
        Ok(Trainer {
            params,
            opt,
            step: 0,
            config,
        })
    }

    pub fn mode(&self) -> TrainMode {
        if self.params.joint_mode {
            TrainMode::Videojam
        } else {
            TrainMode::Base
        }
    }

    /// Runs the next step; the update touches every parameter.
    pub fn train_step(&mut self, set: &TrainingSet<F>) -> Result<StepRecord> {
        let draws = plan_batch(set, &self.config, self.params.joint_mode, self.step as u64);
        let (mut rec, grads) =
            loss_and_grad(&self.params, &draws, self.config.motion_loss_weight).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("step {}: {m}", self.step)),
                other => other,
            })?;
        self.opt.update(&mut self.params, &grads, &self.config);
        if !self.params.is_finite() {
            return Err(Error::NonFinite(format!("parameters diverged at step {}", self.step)));
        }
        rec.step = self.step;
        self.step += 1;
        Ok(rec)
    }

    pub fn state_container(&self) -> Result<Container> {
        let mut entries = Vec::new();
        for (prefix, p) in [
            ("param", &self.params),
            ("adam_m", &self.opt.m),
            ("adam_v", &self.opt.v),
        ] {
            entries.extend(
                p.to_container()
                    .entries
                    .into_iter()
                    .map(|(n, t)| (format!("{prefix}/{n}"), t)),
            );
        }
        let trailer = serde_json::json!({
            "config": self.params.config,
            "joint_mode": self.params.joint_mode,
            "step": self.step,
            "adam_t": self.opt.t,
            "train": serde_json::to_value(&self.config)?,
        });
        Ok(Container { entries, trailer })
    }

    /// Restores a saved state. The training config is taken from the caller
    /// so a resumed run may extend `steps`; the seed must match.
    pub fn from_state(c: &Container, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let part = |prefix: &str| -> Result<ModelParams<F>> {
            let p = format!("{prefix}/");
            let entries = c
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&p).map(|n| (n.to_string(), t.clone())))
                .collect();
            ModelParams::from_container(&Container {
                entries,
                trailer: c.trailer.clone(),
            })
        };
        let saved: TrainConfig = serde_json::from_value(c.trailer["train"].clone())
            .map_err(|e| Error::Format(format!("state trailer: {e}")))?;
        if saved.seed != config.seed {
            return Err(Error::invalid("train.seed", "differs from the saved state"));
        }
        let step = c.trailer["step"]
            .as_u64()
            .ok_or_else(|| Error::Format("state trailer lacks step".into()))? as usize;
        let t = c.trailer["adam_t"]
            .as_u64()
            .ok_or_else(|| Error::Format("state trailer lacks adam_t".into()))?;
        Ok(Trainer {
            params: part("param")?,
            opt: AdamState {
                m: part("adam_m")?,
                v: part("adam_v")?,
                t,
            },
            step,
            config,
        })
    }
}

pub fn save_checkpoint<F: Real>(params: &ModelParams<F>, path: impl AsRef<Path>) -> Result<()> {
    format::save_container(path, &params.to_container())
}

pub fn load_checkpoint<F: Real>(path: impl AsRef<Path>) -> Result<ModelParams<F>> {
    ModelParams::from_container(&format::load_container(path)?)
}

pub fn checkpoint_name(step: usize) -> String {
    format!("checkpoint_{step:06}.vjc")
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub params: ModelParams<F>,
    pub records: Vec<StepRecord>,
    pub final_checkpoint: PathBuf,
}

pub fn read_loss_csv(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_CSV_HEADER) {
        return Err(Error::Format("loss CSV header mismatch".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(StepRecord::parse_csv_row)
        .collect()
}

/// Trains to `config.steps` completed steps, writing `loss.csv`, periodic
/// checkpoints, the final checkpoint and a resumable state into `out_dir`.
/// With `resume`, continues from the state saved there.
pub fn train<F: Real>(
    params: ModelParams<F>,
    set: &TrainingSet<F>,
    config: &TrainConfig,
    out_dir: &Path,
    resume: bool,
    mut progress: impl FnMut(&StepRecord),
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join(LOSS_CSV);
    let (mut trainer, mut records) = if resume {
        let t = Trainer::from_state(&format::load_container(out_dir.join(STATE_FILE))?, config.clone())?;
        let mut rows = read_loss_csv(&csv_path)?;
        rows.retain(|r| r.step < t.step);
        (t, rows)
    } else {
        (Trainer::new(params, config.clone())?, Vec::new())
    };
    let mut csv = fs::File::create(&csv_path)?;
    writeln!(csv, "{LOSS_CSV_HEADER}")?;
    for r in &records {
        writeln!(csv, "{}", r.csv_row())?;
    }
    while trainer.step < config.steps {
        let rec = trainer.train_step(set)?;
        writeln!(csv, "{}", rec.csv_row())?;
        progress(&rec);
        records.push(rec);
        let done = trainer.step;
        if config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0 && done < config.steps {
            save_checkpoint(&trainer.params, out_dir.join(checkpoint_name(done)))?;
            format::save_container(out_dir.join(STATE_FILE), &trainer.state_container()?)?;
        }
    }
    csv.flush()?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&trainer.params, &final_checkpoint)?;
    format::save_container(out_dir.join(STATE_FILE), &trainer.state_container()?)?;
    Ok(TrainOutcome {
        params: trainer.params,
        records,
        final_checkpoint,
    })
}

/// Mean item loss on a fixed set of draws (no dropout) keyed by `seed`; the
/// same `seed` always measures on identical items, timesteps and noise.
pub fn evaluate_loss<F: Real>(
    params: &ModelParams<F>,
    set: &TrainingSet<F>,
    n_draws: usize,
    seed: u64,
    motion_weight: f64,
) -> Result<f64> {
    let draws = eval_draws(set, n_draws, seed);
    let mut total = 0.0;
    for d in &draws {
        total += item_loss(params, d, motion_weight)?.loss;
    }
    Ok(total / draws.len().max(1) as f64)
}

pub fn eval_draws<F: Real>(set: &TrainingSet<F>, n_draws: usize, seed: u64) -> Vec<Draw<F>> {
    let mut rng = step_rng(seed, u64::MAX);
    (0..n_draws)
        .map(|i| {
            let ex = &set.examples[i % set.examples.len()];
            Draw::sample(&mut rng, ex, set.grid)
        })
        .collect()
}

/// Largest relative error `|a - fd| / max(|a|, |fd|, 1e-8)` between the
/// analytic gradient and central differences of `f` over `coords`.
pub fn finite_difference_error(
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    epsilon: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        probe[i] = x[i] + epsilon;
        let plus = f(&probe);
        probe[i] = x[i] - epsilon;
        let minus = f(&probe);
        probe[i] = x[i];
        let fd = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

fn flatten(p: &ModelParams<f64>) -> Vec<f64> {
    p.tensors()
        .iter()
        .flat_map(|(_, a)| a.iter().copied().collect::<Vec<_>>())
        .collect()
}

fn unflatten(p: &mut ModelParams<f64>, flat: &[f64]) {
    let mut it = flat.iter();
    for (_, mut a) in p.tensors_mut() {
        a.iter_mut()
            .for_each(|v| *v = *it.next().expect("flat vector matches the model"));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords: usize,
}

/// Checks [`loss_and_grad`] against central differences on `n_coords`
/// parameter coordinates sampled with `seed`.
pub fn grad_check(
    params: &ModelParams<f64>,
    draws: &[Draw<f64>],
    motion_weight: f64,
    epsilon: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grad(params, draws, motion_weight)?;
    let x = flatten(params);
    let analytic = flatten(&grads);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_coords.min(x.len());
    let coords = index::sample(&mut rng, x.len(), n).into_vec();
    let mut work = params.clone();
    let mut failure = None;
    let max_rel_error = finite_difference_error(&x, &analytic, &coords, epsilon, |v| {
        unflatten(&mut work, v);
        match loss_and_grad_value(&work, draws, motion_weight) {
            Ok(l) => l,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(GradCheckReport {
        max_rel_error,
        coords: n,
    })
}

fn loss_and_grad_value(params: &ModelParams<f64>, draws: &[Draw<f64>], w: f64) -> Result<f64> {
    let mut total = 0.0;
    for d in draws {
        total += item_loss(params, d, w)?.loss;
    }
    Ok(total / draws.len() as f64)
}

/// A two-item micro-batch of `frames x size x size` random videos for
/// gradient checks: one fully conditioned item and one with both conditions
/// dropped.
pub fn micro_batch(config: &ModelConfig, frames: usize, size: usize, seed: u64) -> Result<Vec<Draw<f64>>> {
    let patch = config.patch_size();
    patch.check(frames, size, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = (frames, size, size, config.in_channels);
    let mut out = Vec::new();
    for k in 0..2 {
        let video = ndarray::Array4::from_shape_simple_fn(dims, || rng.random_range(-1.0..1.0));
        let flow = ndarray::Array4::from_shape_simple_fn(dims, || rng.random_range(-1.0..1.0));
        let ex = Example {
            x1: patchify(video.view(), patch)?,
            d1: patchify(flow.view(), patch)?,
            class_id: rng.random_range(0..config.n_classes),
        };
        let mut d = Draw::sample(&mut rng, &ex, patch.grid(frames, size, size));
        if k == 1 {
            d.class = None;
            d.drop_flow = true;
        }
        out.push(d);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jamdit::{extend_joint, init_base};
    use crate::synthdata::{Dataset, DatasetConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            embed_dim: 12,
            n_blocks: 1,
            n_heads: 2,
            mlp_ratio: 2.0,
            ..ModelConfig::default()
        }
    }

    fn tiny_set() -> TrainingSet<f64> {
        let ds = DatasetConfig {
            n_train: 6,
            n_holdout: 0,
            frames: 2,
            height: 8,
            width: 8,
            size_min: 2,
            size_max: 3,
            max_axis_speed: 1,
        };
        let d = Dataset::generate(&ds, 5).unwrap();
        TrainingSet::new(&d.train, &tiny_model(), DEFAULT_SIGMA).unwrap()
    }

    fn joint(seed: u64) -> ModelParams<f64> {
        extend_joint(&init_base(&tiny_model(), seed).unwrap(), seed + 1).unwrap()
    }

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            checkpoint_interval: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn dropout_extremes_and_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_dropout(&mut rng, 0.0, 0.0), DropoutDecision::default());
            assert!(sample_dropout(&mut rng, 1.0, 0.0).drop_text);
        }
        let (mut text, mut flow) = (0, 0);
        for _ in 0..10_000 {
            let d = sample_dropout(&mut rng, 0.3, 0.2);
            text += usize::from(d.drop_text);
            flow += usize::from(d.drop_flow);
        }
        assert!((text as f64 / 1e4 - 0.3).abs() < 0.02, "{text}");
        assert!((flow as f64 / 1e4 - 0.2).abs() < 0.02, "{flow}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().unwrap_err().to_string()
        };
        assert!(bad(|c| c.p_drop_text = 1.5).contains("p_drop_text"));
        assert!(bad(|c| c.p_drop_flow = -0.1).contains("p_drop_flow"));
        assert!(bad(|c| c.steps = 0).contains("steps"));
        assert!(bad(|c| c.beta2 = 1.0).contains("beta2"));
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let set = tiny_set();
        let p = joint(1);
        let mut t = Trainer::new(
            p.clone(),
            TrainConfig {
                learning_rate: 0.0,
                ..quick(3)
            },
        )
        .unwrap();
        for _ in 0..3 {
            assert!(t.train_step(&set).unwrap().loss > 0.0);
        }
        assert_eq!(t.params, p);
    }

    #[test]
    fn every_parameter_group_moves() {
        let set = tiny_set();
        let p = joint(2);
        let mut t = Trainer::new(
            p.clone(),
            TrainConfig {
                p_drop_flow: 0.0,
                p_drop_text: 0.0,
                ..quick(1)
            },
        )
        .unwrap();
        t.train_step(&set).unwrap();
        for ((name, before), (_, after)) in p.tensors().into_iter().zip(t.params.tensors()) {
            // The null-class row is untouched with text dropout off.
            if name == "class_embed" {
                continue;
            }
            assert_ne!(before, after, "{name} did not change");
        }
    }

    #[test]
    fn steps_are_deterministic() {
        let set = tiny_set();
        let run = || {
            let mut t = Trainer::new(joint(3), quick(4)).unwrap();
            (0..4).map(|_| t.train_step(&set).unwrap().loss).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dropped_flow_masks_motion_gradient() {
        let set = tiny_set();
        let p = joint(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut d = Draw::sample(&mut rng, &set.examples[0], set.grid);
        d.drop_flow = true;
        let (r1, g1) = loss_and_grad(&p, std::slice::from_ref(&d), 1.0).unwrap();
        let mut perturbed = d.clone();
        perturbed.d1.mapv_inplace(|v| v + 0.7);
        perturbed.d0.mapv_inplace(|v| v * -2.0);
        let (r2, g2) = loss_and_grad(&p, std::slice::from_ref(&perturbed), 1.0).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(g1, g2);
        // With the flow kept, the same perturbation changes the gradient.
        d.drop_flow = false;
        perturbed.drop_flow = false;
        assert_ne!(
            loss_and_grad(&p, &[d], 1.0).unwrap().1,
            loss_and_grad(&p, &[perturbed], 1.0).unwrap().1
        );
    }

    #[test]
    fn joint_loss_weighting() {
        let set = tiny_set();
        let p = joint(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Draw::sample(&mut rng, &set.examples[1], set.grid);
        let l = item_loss(&p, &d, 1.0).unwrap();
        let ld = l.loss_d.unwrap();
        assert!((l.loss - (l.loss_x + ld) / 2.0).abs() < 1e-12);
        let l3 = item_loss(&p, &d, 3.0).unwrap();
        assert!((l3.loss - (l.loss_x + 3.0 * ld) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = tiny_model();
        let mut p = joint(6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (_, mut a) in p.tensors_mut() {
            a.mapv_inplace(|v| v + 0.05 * rng.sample::<f64, _>(StandardNormal));
        }
        let draws = micro_batch(&cfg, 2, 4, 3).unwrap();
        let r = grad_check(&p, &draws, 1.0, 1e-5, 200, 7).unwrap();
        assert_eq!(r.coords, 200);
        assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
    }

    #[test]
    fn finite_differences_exact_on_linear_function() {
        let a = [3.0, -2.0, 0.5, 7.25];
        let x = [0.1, 0.2, -0.3, 1.0];
        let f = |v: &[f64]| v.iter().zip(&a).map(|(p, q)| p * q).sum::<f64>();
        let err = finite_difference_error(&x, &a, &[0, 1, 2, 3], 1e-3, f);
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn checkpoint_round_trip_and_state_resume() {
        let dir = tempfile::tempdir().unwrap();
        let set = tiny_set();
        let p = joint(7);
        let path = dir.path().join("m.vjc");
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint::<f64>(&path).unwrap(), p);

        let cfg = TrainConfig {
            checkpoint_interval: 2,
            ..quick(5)
        };
        let full = train(p.clone(), &set, &cfg, &dir.path().join("full"), false, |_| {}).unwrap();
        let part = dir.path().join("part");
        train(
            p.clone(),
            &set,
            &TrainConfig {
                steps: 2,
                ..cfg.clone()
            },
            &part,
            false,
            |_| {},
        )
        .unwrap();
        let resumed = train(p, &set, &cfg, &part, true, |_| {}).unwrap();
        assert_eq!(full.records, resumed.records);
        assert_eq!(full.params, resumed.params);
        assert_eq!(read_loss_csv(part.join(LOSS_CSV)).unwrap(), full.records);
        assert!(full.final_checkpoint.exists());
        assert!(dir.path().join("full").join(checkpoint_name(2)).exists());
        assert!(dir.path().join("full").join(checkpoint_name(4)).exists());
    }

    #[test]
    fn single_step_writes_only_final_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_interval: 1,
            ..quick(1)
        };
        let out = train(joint(8), &tiny_set(), &cfg, dir.path(), false, |_| {}).unwrap();
        let ckpts: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with("checkpoint_"))
            .collect();
        assert!(ckpts.is_empty());
        assert_eq!(out.records.len(), 1);
        assert!(out.final_checkpoint.exists());
    }

    #[test]
    fn base_mode_reports_appearance_only() {
        let set = tiny_set();
        let mut t = Trainer::new(init_base::<f64>(&tiny_model(), 1).unwrap(), quick(1)).unwrap();
        assert_eq!(t.mode(), TrainMode::Base);
        let r = t.train_step(&set).unwrap();
        assert_eq!(r.loss, r.loss_x);
        assert_eq!(r.loss_d, 0.0);
        assert_eq!(r.dropped_flow_frac, 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let r = StepRecord {
            step: 3,
            loss: 0.1 + 0.2,
            loss_x: 1.0 / 3.0,
            loss_d: 0.0,
            dropped_text_frac: 0.25,
            dropped_flow_frac: 0.5,
        };
        assert_eq!(StepRecord::parse_csv_row(&r.csv_row()).unwrap(), r);
    }
}
