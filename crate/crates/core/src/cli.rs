//! Command-line front end. Exit status 1 means a usage or validation error,
//! 2 an I/O or file-format error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{Axis, Ix4};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::flowfield::flow_video_for;
use crate::flowmatch::{euler_sample, make_schedule, ScheduleKind};
use crate::format::{self, Tensor};
use crate::guidance::GuidanceRule;
use crate::jamdit::{extend_joint, init_base, ModelParams};
use crate::probes::{coherence_report, default_variants, sdedit_probe, shuffle_loss_probe};
use crate::synthdata::{build_dataset, Dataset, MANIFEST_FILE};
use crate::trainer::{self, load_checkpoint, save_checkpoint, TrainMode, TrainingSet};

#[derive(Parser, Debug)]
#[command(
    name = "videojam",
    version,
    about = "Joint appearance-motion flow matching on toy videos"
)]
pub struct Cli {
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic moving-shapes corpus.
    GenData(GenDataArgs),
    /// Pretrain a base model or fine-tune an extended one.
    Train(TrainArgs),
    /// Generate videos and flow videos from a checkpoint.
    Sample(SampleArgs),
    /// Run a diagnostic probe.
    Probe(ProbeArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_holdout: Option<usize>,
    /// Replace an existing dataset in `--out`.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (defaults to `train.dataset` from the config).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<TrainMode>,
    /// Starting checkpoint; required for `videojam` mode.
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Continue from the training state saved in `--out`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    /// Print a progress line every this many steps (0 = silent).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub w1: Option<f64>,
    #[arg(long)]
    pub w2: Option<f64>,
    /// Fraction of steps that use motion guidance.
    #[arg(long)]
    pub gate: Option<f64>,
    #[arg(long)]
    pub schedule: Option<ScheduleKind>,
    #[arg(long)]
    pub rule: Option<GuidanceRule>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Write every frame as a PPM image.
    #[arg(long)]
    pub ppm: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    Shuffle,
    Sdedit,
    Coherence,
}

impl std::str::FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shuffle" => Ok(ProbeKind::Shuffle),
            "sdedit" => Ok(ProbeKind::Sdedit),
            "coherence" => Ok(ProbeKind::Coherence),
            other => Err(Error::invalid("probe", format!("unknown probe {other:?}"))),
        }
    }
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub probe: ProbeKind,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory; the shuffle and sdedit probes use its holdout split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// SDEdit start times, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub start: Option<Vec<f64>>,
    #[arg(long)]
    pub sources: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Shuffle probe: force the identity permutation.
    #[arg(long)]
    pub identity: bool,
    #[arg(long)]
    pub samples_per_bucket: Option<usize>,
    /// Coherence probe: samples per class.
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Coherence probe: class ids, comma separated (default: all).
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<usize>>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::GenData(a) => cmd_gen_data(config, a),
        Command::Train(a) => cmd_train(config, a),
        Command::Sample(a) => cmd_sample(config, a),
        Command::Probe(a) => cmd_probe(config, a),
    }
}

pub fn cmd_gen_data(mut config: RunConfig, a: GenDataArgs) -> Result<()> {
    if let Some(n) = a.n_train {
        config.dataset.n_train = n;
    }
    if let Some(n) = a.n_holdout {
        config.dataset.n_holdout = n;
    }
    config.validate()?;
    let manifest = build_dataset(&config.dataset, a.seed, &a.out, a.overwrite)?;
    config.echo(&a.out)?;
    println!(
        "{} ({} train, {} holdout)",
        a.out.join(MANIFEST_FILE).display(),
        manifest.train.len(),
        manifest.holdout.len()
    );
    Ok(())
}

fn load_dataset(path: Option<&Path>) -> Result<Dataset> {
    let path = path.ok_or_else(|| Error::invalid("data", "pass --data or set train.dataset"))?;
    Dataset::load(path)
}

pub fn cmd_train(mut config: RunConfig, a: TrainArgs) -> Result<()> {
    let t = &mut config.train;
    if let Some(v) = a.mode {
        t.mode = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.checkpoint_interval {
        t.checkpoint_interval = v;
    }
    if let Some(d) = a.data {
        t.dataset = Some(d);
    }
    if let Some(f) = a.from {
        t.init_checkpoint = Some(f);
    }
    let zero_steps = a.steps == Some(0);
    if let Some(v) = a.steps.filter(|&s| s > 0) {
        t.steps = v;
    }
    config.validate()?;
    let t = &config.train;

    let params: ModelParams<f32> = if a.resume {
        // Replaced by the saved state; only shapes matter here.
        ModelParams::zeros(&config.model, t.mode == TrainMode::Videojam)
    } else {
        match (t.mode, &t.init_checkpoint) {
            (TrainMode::Base, None) => init_base(&config.model, t.seed)?,
            (TrainMode::Base, Some(p)) => {
                let m: ModelParams<f32> = load_checkpoint(p)?;
                if m.joint_mode {
                    return Err(Error::invalid("from", "base mode needs a base checkpoint"));
                }
                m
            }
            (TrainMode::Videojam, None) => {
                return Err(Error::invalid("from", "videojam mode needs --from <base checkpoint>"));
            }
            (TrainMode::Videojam, Some(p)) => {
                let m: ModelParams<f32> = load_checkpoint(p)?;
                if m.joint_mode {
                    m
                } else {
                    extend_joint(&m, t.seed)?
                }
            }
        }
    };
    config.model = params.config.clone();

    fs::create_dir_all(&a.out)?;
    if zero_steps {
        let path = a.out.join(trainer::FINAL_CHECKPOINT);
        save_checkpoint(&params, &path)?;
        fs::write(a.out.join(trainer::LOSS_CSV), format!("{}\n", trainer::LOSS_CSV_HEADER))?;
        fs::write(a.out.join(crate::config::CONFIG_ECHO), config.to_json())?;
        println!("{}", path.display());
        return Ok(());
    }

    let ds = load_dataset(t.dataset.as_deref())?;
    let set = TrainingSet::<f32>::new(&ds.train, &params.config, t.flow_sigma)?;
    config.echo(&a.out)?;
    let log_every = a.log_every;
    let outcome = trainer::train(params, &set, &config.train, &a.out, a.resume, |r| {
        if log_every > 0 && (r.step + 1) % log_every == 0 {
            eprintln!(
                "step {} loss {:.5} (x {:.5}, d {:.5})",
                r.step + 1,
                r.loss,
                r.loss_x,
                r.loss_d
            );
        }
    })?;
    println!("{}", outcome.final_checkpoint.display());
    Ok(())
}

fn save_video(path: &Path, data: &ndarray::Array4<f64>) -> Result<()> {
    format::save_tensor(path, &Tensor::F64(data.clone().into_dyn()))
}

fn dump_ppm(dir: &Path, stem: &str, data: &ndarray::Array4<f64>) -> Result<()> {
    for (i, frame) in data.axis_iter(Axis(0)).enumerate() {
        format::write_ppm(dir.join(format!("{stem}_{i:02}.ppm")), frame)?;
    }
    Ok(())
}

pub fn cmd_sample(mut config: RunConfig, a: SampleArgs) -> Result<()> {
    let (g, s) = (&mut config.guidance, &mut config.sample);
    if let Some(v) = a.w1 {
        g.w1 = v;
    }
    if let Some(v) = a.w2 {
        g.w2 = v;
    }
    if let Some(v) = a.gate {
        g.motion_gate_fraction = v;
    }
    if let Some(v) = a.rule {
        g.rule = v;
    }
    if let Some(v) = a.steps {
        s.steps = v;
    }
    if let Some(v) = a.schedule {
        s.schedule = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.class {
        s.class_id = v;
    }
    if let Some(v) = a.count {
        s.count = v;
    }
    s.dump_frames |= a.ppm;
    let params: ModelParams<f32> = load_checkpoint(&a.checkpoint)?;
    config.model = params.config.clone();
    config.validate()?;
    let s = &config.sample;
    let schedule = make_schedule(s.steps, s.schedule)?;
    let d = &config.dataset;
    let dims = (d.frames, d.height, d.width, params.config.in_channels);
    fs::create_dir_all(&a.out)?;
    config.echo(&a.out)?;
    for i in 0..s.count {
        let seed = s.seed.wrapping_add(i as u64);
        let (video, fv) = euler_sample(&params, dims, Some(s.class_id), &config.guidance, &schedule, seed)?;
        let vp = a.out.join(format!("sample_{i}_video.vjt"));
        save_video(&vp, &video.data)?;
        save_video(&a.out.join(format!("sample_{i}_flow.vjt")), &fv.data)?;
        if s.dump_frames {
            dump_ppm(&a.out, &format!("sample_{i}_video"), &video.data)?;
            dump_ppm(&a.out, &format!("sample_{i}_flow"), &fv.data)?;
        }
        println!("{}", vp.display());
    }
    Ok(())
}

pub fn cmd_probe(mut config: RunConfig, a: ProbeArgs) -> Result<()> {
    let p = &mut config.probe;
    if let Some(v) = a.seed {
        p.seed = v;
        p.shuffle.seed = v;
    }
    if let Some(v) = a.steps {
        p.steps = v;
    }
    if let Some(v) = a.start.clone() {
        p.sdedit_starts = v;
    }
    if let Some(v) = a.sources {
        p.sdedit_sources = v;
    }
    if let Some(v) = a.samples_per_bucket {
        p.shuffle.samples_per_bucket = v;
    }
    if let Some(v) = a.per_class {
        p.coherence_per_class = v;
    }
    p.shuffle.identity |= a.identity;
    if let Some(d) = &a.data {
        config.train.dataset = Some(d.clone());
    }
    let params: ModelParams<f32> = load_checkpoint(&a.checkpoint)?;
    config.model = params.config.clone();
    config.validate()?;
    fs::create_dir_all(&a.out)?;
    config.echo(&a.out)?;
    let p = &config.probe;
    match a.probe {
        ProbeKind::Shuffle => {
            let ds = load_dataset(config.train.dataset.as_deref())?;
            let curve = shuffle_loss_probe(&params, &ds.holdout, &p.shuffle)?;
            fs::write(a.out.join("shuffle_curve.csv"), curve.to_csv())?;
            let text = format!(
                "model: {:?}\nmean delta_loss t in [0, 0.6]: {}\nmean delta_loss t in (0.6, 1]: {}\n",
                curve.tag,
                curve.mean_over(0.0, 0.6),
                curve.mean_over(0.6 + 1e-9, 1.0)
            );
            fs::write(a.out.join("shuffle_report.txt"), &text)?;
            print!("{text}");
        }
        ProbeKind::Sdedit => {
            let ds = load_dataset(config.train.dataset.as_deref())?;
            if ds.holdout.is_empty() {
                return Err(Error::invalid("data", "dataset has no holdout items"));
            }
            let schedule = make_schedule(p.steps, ScheduleKind::Uniform)?;
            let mut csv = String::from("source,t_start,structure_error,structure_similarity\n");
            let mut sums = vec![0.0; p.sdedit_starts.len()];
            let n = p.sdedit_sources.min(ds.holdout.len()).max(1);
            for (si, item) in ds.holdout.iter().take(n).enumerate() {
                let fv = flow_video_for(&item.flow, config.train.flow_sigma)?;
                let outs = sdedit_probe(
                    &params,
                    &item.video,
                    &fv,
                    Some(item.class_id),
                    &p.sdedit_starts,
                    &config.guidance,
                    &schedule,
                    p.seed.wrapping_add(si as u64),
                )?;
                for (k, o) in outs.iter().enumerate() {
                    csv.push_str(&format!(
                        "{si},{},{},{}\n",
                        o.t_start, o.structure_error, o.structure_similarity
                    ));
                    sums[k] += o.structure_similarity;
                    let stem = format!("sdedit_{si}_t{k}");
                    save_video(&a.out.join(format!("{stem}_video.vjt")), &o.video.data)?;
                    save_video(&a.out.join(format!("{stem}_flow.vjt")), &o.flow_video.data)?;
                }
            }
            fs::write(a.out.join("sdedit.csv"), csv)?;
            let mut text = String::from("t_start mean_structure_similarity\n");
            for (t, s) in p.sdedit_starts.iter().zip(&sums) {
                text.push_str(&format!("{t} {}\n", s / n as f64));
            }
            fs::write(a.out.join("sdedit_report.txt"), &text)?;
            print!("{text}");
        }
        ProbeKind::Coherence => {
            let classes: Vec<usize> = a
                .classes
                .clone()
                .unwrap_or_else(|| (0..params.config.n_classes).collect());
            let schedule = make_schedule(p.steps, ScheduleKind::Uniform)?;
            let d = &config.dataset;
            let dims = (d.frames, d.height, d.width, params.config.in_channels);
            let report = coherence_report(
                &params,
                &classes,
                p.coherence_per_class,
                &default_variants_with(&config),
                &schedule,
                dims,
                p.seed,
            )?;
            fs::write(a.out.join("coherence.csv"), report.to_csv())?;
            let text = report.to_text();
            fs::write(a.out.join("coherence.txt"), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

/// The four compared variants, with the inner/cfg weights and gate taken
/// from the run config.
fn default_variants_with(config: &RunConfig) -> Vec<crate::probes::Variant> {
    let g = &config.guidance;
    default_variants()
        .into_iter()
        .map(|mut v| {
            if v.guidance.rule != GuidanceRule::Ip2p {
                v.guidance.w1 = g.w1;
                if v.name == "inner" {
                    v.guidance.w2 = g.w2;
                }
            }
            v.guidance.motion_gate_fraction = g.motion_gate_fraction;
            v
        })
        .collect()
}

/// Loads a `.vjt` file as a 4-D `f64` array.
pub fn load_video_tensor(path: impl AsRef<Path>) -> Result<ndarray::Array4<f64>> {
    format::load_tensor(path.as_ref())?
        .to_f64()
        .into_dimensionality::<Ix4>()
        .map_err(|_| Error::Format(format!("{} is not 4-D", path.as_ref().display())))
}
