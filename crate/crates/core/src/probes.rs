//! Diagnostics: the frame-shuffle loss probe, the SDEdit re-noising probe and
//! a motion-coherence report comparing guidance rules on paired seeds.

use std::fmt::Write as _;

use ndarray::{Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowfield::{
    decode_flow_rgb, endpoint_error, endpoint_error_masked, estimate_flow_blockmatch, flow_video_for,
    in_frame_block_mask, FlowVideo, DEFAULT_BLOCK,
};
use crate::flowmatch::{draw_noise, euler_integrate, euler_sample, finish, interpolate, JointState, TimestepSchedule};
use crate::guidance::{GuidanceConfig, GuidanceRule, VelocityModel};
use crate::jamdit::{patchify, ModelParams};
use crate::real::Real;
use crate::synthdata::{permute_frames, random_permutation, Item, Video, DEFAULT_SEARCH_RADIUS};
use crate::trainer::{item_loss, Draw, TrainMode};

pub const DEFAULT_BUCKETS: usize = 10;

/// Mean loss change from shuffling frames, per timestep bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCurve {
    pub centers: Vec<f64>,
    pub delta_loss: Vec<f64>,
    pub counts: Vec<usize>,
    pub tag: TrainMode,
}

impl ProbeCurve {
    /// Count-weighted mean of the buckets whose centers lie in `[lo, hi]`.
    pub fn mean_over(&self, lo: f64, hi: f64) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for ((&c, &d), &k) in self.centers.iter().zip(&self.delta_loss).zip(&self.counts) {
            if c >= lo && c <= hi {
                s += d * k as f64;
                n += k;
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    /// Two-column `t_bucket,delta_loss` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_bucket,delta_loss\n");
        for (c, d) in self.centers.iter().zip(&self.delta_loss) {
            writeln!(out, "{c},{d}").unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShuffleProbeConfig {
    pub n_buckets: usize,
    pub samples_per_bucket: usize,
    pub seed: u64,
    /// Replace the random permutation with the identity (a null check).
    pub identity: bool,
    pub flow_sigma: f64,
}

impl Default for ShuffleProbeConfig {
    fn default() -> Self {
        ShuffleProbeConfig {
            n_buckets: DEFAULT_BUCKETS,
            samples_per_bucket: 16,
            seed: 0,
            identity: false,
            flow_sigma: crate::flowfield::DEFAULT_SIGMA,
        }
    }
}

/// For random `(item, t)` per bucket, noises the original and the
/// frame-permuted item with the same `x0` and records the loss difference
/// `loss(permuted) - loss(original)`, each measured with the model's own
/// training loss. A joint model sees the flow video permuted alongside.
pub fn shuffle_loss_probe<F: Real>(
    params: &ModelParams<F>,
    holdout: &[Item],
    config: &ShuffleProbeConfig,
) -> Result<ProbeCurve> {
    if holdout.is_empty() {
        return Err(Error::invalid("holdout", "empty holdout set"));
    }
    if config.n_buckets == 0 || config.samples_per_bucket == 0 {
        return Err(Error::invalid("probe", "need at least one bucket and one sample"));
    }
    let patch = params.config.patch_size();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let nb = config.n_buckets;
    let mut curve = ProbeCurve {
        centers: (0..nb).map(|b| (b as f64 + 0.5) / nb as f64).collect(),
        delta_loss: vec![0.0; nb],
        counts: vec![0; nb],
        tag: if params.joint_mode {
            TrainMode::Videojam
        } else {
            TrainMode::Base
        },
    };
    for b in 0..nb {
        let mut sum = 0.0;
        for _ in 0..config.samples_per_bucket {
            let item = &holdout[rng.random_range(0..holdout.len())];
            let t = (b as f64 + rng.random::<f64>()) / nb as f64;
            let frames = item.video.frames();
            let perm: Vec<usize> = if config.identity {
                (0..frames).collect()
            } else {
                random_permutation(frames, rng.random())?
            };
            let fv = flow_video_for(&item.flow, config.flow_sigma)?;
            let (v, d) = (&item.video.data, &fv.data);
            let (pv, pd) = (permute_frames(v.view(), &perm), permute_frames(d.view(), &perm));
            let tok = |a: &Array4<f64>| patchify(a.mapv(F::of).view(), patch);
            let (x1, d1) = (tok(v)?, tok(d)?);
            let (dims_t, h, w, _) = v.dim();
            let grid = patch.grid(dims_t, h, w);
            let (n, td) = x1.dim();
            let noise = |rng: &mut ChaCha8Rng| {
                ndarray::Array2::from_shape_simple_fn((n, td), || F::of(rng.sample(rand_distr::StandardNormal)))
            };
            let x0 = noise(&mut rng);
            let d0 = noise(&mut rng);
            let orig = Draw {
                x1,
                d1,
                class: Some(item.class_id),
                drop_flow: false,
                t,
                x0,
                d0,
                grid,
            };
            let shuffled = Draw {
                x1: tok(&pv)?,
                d1: tok(&pd)?,
                ..orig.clone()
            };
            let lo = item_loss(params, &orig, 1.0)?.loss;
            let ls = item_loss(params, &shuffled, 1.0)?.loss;
            sum += ls - lo;
        }
        curve.delta_loss[b] = sum / config.samples_per_bucket as f64;
        curve.counts[b] = config.samples_per_bucket;
    }
    Ok(curve)
}

/// Block-matching flow with the defaults used for every generated video.
pub fn estimate_flow(video: &Video) -> Result<crate::flowfield::FlowField> {
    estimate_flow_blockmatch(video, DEFAULT_BLOCK, DEFAULT_SEARCH_RADIUS)
}

/// One SDEdit continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeditOutput {
    pub t_start: f64,
    pub video: Video,
    pub flow_video: FlowVideo,
    /// Endpoint error between block-matching flow of the output and of the source.
    pub structure_error: f64,
    /// `1 / (1 + structure_error)`: 1 for identical motion.
    pub structure_similarity: f64,
}

/// Noises the source pair to each `t*` and integrates from `t*` to 1. Step
/// indices stay absolute, so the motion gate matches a full generation.
#[allow(clippy::too_many_arguments)]
pub fn sdedit_probe<M: VelocityModel + ?Sized>(
    model: &M,
    source: &Video,
    source_flow: &FlowVideo,
    class: Option<usize>,
    start_ts: &[f64],
    guidance: &GuidanceConfig,
    schedule: &TimestepSchedule,
    seed: u64,
) -> Result<Vec<SdeditOutput>> {
    if source.data.dim() != source_flow.data.dim() {
        return Err(Error::shape("source video and flow video differ in shape".to_string()));
    }
    let src_flow = estimate_flow(source)?;
    let dims = source.data.dim();
    let mut out = Vec::with_capacity(start_ts.len());
    for &ts in start_ts {
        if !(0.0..=1.0).contains(&ts) {
            return Err(Error::invalid("start_t", format!("{ts} outside [0, 1]")));
        }
        let (x0, d0) = draw_noise(dims, seed);
        let state = JointState::new(
            interpolate(source.view(), x0.view(), ts)?,
            interpolate(source_flow.view(), d0.view(), ts)?,
            ts,
        )?;
        let end = euler_integrate(model, state, class, guidance, schedule, schedule.first_step_from(ts))?;
        let (video, flow_video) = finish(end);
        let structure_error = endpoint_error(&estimate_flow(&video)?, &src_flow)?;
        out.push(SdeditOutput {
            t_start: ts,
            video,
            flow_video,
            structure_error,
            structure_similarity: 1.0 / (1.0 + structure_error),
        });
    }
    Ok(out)
}

/// Mean magnitude of the temporal second difference `x[t+1] - 2 x[t] + x[t-1]`
/// over pixels and channels; 0 for fewer than 3 frames.
pub fn smoothness(video: &Video) -> f64 {
    let t = video.frames();
    if t < 3 {
        return 0.0;
    }
    let d = &video.data;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 1..t - 1 {
        let (a, b, c) = (
            d.index_axis(Axis(0), i - 1),
            d.index_axis(Axis(0), i),
            d.index_axis(Axis(0), i + 1),
        );
        ndarray::Zip::from(&a).and(&b).and(&c).for_each(|&a, &b, &c| {
            sum += (c - 2.0 * b + a).abs();
            n += 1;
        });
    }
    sum / n as f64
}

/// The three coherence metrics of one generated pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Endpoint error between the decoded motion prediction and block-matching
    /// flow of the video, over pixels whose predicted block stays in-frame.
    pub flow_consistency: f64,
    /// Mean block-matching flow magnitude.
    pub dynamic_degree: f64,
    pub smoothness: f64,
}

pub fn video_metrics(video: &Video, flow_video: &FlowVideo) -> Result<Metrics> {
    let predicted = decode_flow_rgb(flow_video)?.unpadded();
    let estimated = estimate_flow(video)?;
    let rounded = crate::flowfield::FlowField::new(predicted.data.mapv(f64::round), false)?;
    let mask = in_frame_block_mask(&rounded, DEFAULT_BLOCK);
    Ok(Metrics {
        flow_consistency: endpoint_error_masked(&predicted, &estimated, &mask)?,
        dynamic_degree: estimated.mean_magnitude(),
        smoothness: smoothness(video),
    })
}

/// A named guidance setting in the comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub guidance: GuidanceConfig,
}

/// The four settings compared by default: inner guidance with and without
/// the motion term, the IP2P rule and plain CFG.
pub fn default_variants() -> Vec<Variant> {
    let inner = GuidanceConfig::default();
    vec![
        Variant {
            name: "inner".into(),
            guidance: inner.clone(),
        },
        Variant {
            name: "inner_w2_0".into(),
            guidance: GuidanceConfig {
                w2: 0.0,
                ..inner.clone()
            },
        },
        Variant {
            name: "ip2p".into(),
            guidance: GuidanceConfig::ip2p_default(),
        },
        Variant {
            name: "cfg".into(),
            guidance: GuidanceConfig {
                rule: GuidanceRule::Cfg,
                w2: 0.0,
                ..inner
            },
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub variant: String,
    pub class_id: usize,
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub n: usize,
    pub mean: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: Vec<SampleMetrics>,
    pub summaries: Vec<VariantSummary>,
}

impl MetricsReport {
    pub fn summary(&self, name: &str) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,class_id,seed,flow_consistency,dynamic_degree,smoothness\n");
        for s in &self.samples {
            let m = s.metrics;
            writeln!(
                out,
                "{},{},{},{},{},{}",
                s.variant, s.class_id, s.seed, m.flow_consistency, m.dynamic_degree, m.smoothness
            )
            .unwrap();
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<12} {:>5} {:>6} {:>6} {:>6} {:>16} {:>14} {:>10}",
            "variant", "rule", "w1", "w2", "gate", "flow_consistency", "dynamic_degree", "smoothness"
        )
        .unwrap();
        for s in &self.summaries {
            let g = &s.variant.guidance;
            let rule = match g.rule {
                GuidanceRule::Inner => "inner",
                GuidanceRule::Cfg => "cfg",
                GuidanceRule::Ip2p => "ip2p",
            };
            writeln!(
                out,
                "{:<12} {:>5} {:>6} {:>6} {:>6} {:>16.5} {:>14.5} {:>10.5}",
                s.variant.name,
                rule,
                g.w1,
                g.w2,
                g.motion_gate_fraction,
                s.mean.flow_consistency,
                s.mean.dynamic_degree,
                s.mean.smoothness
            )
            .unwrap();
        }
        writeln!(
            out,
            "samples per variant: {}",
            self.summaries.first().map_or(0, |s| s.n)
        )
        .unwrap();
        out
    }
}

/// Seed of sample `k` of class position `ci`; the same under every variant.
pub fn paired_seed(seed: u64, ci: usize, k: usize, per_class: usize) -> u64 {
    seed.wrapping_add((ci * per_class + k) as u64)
}

/// Generates `n_per_class` samples per class under every variant from the
/// same initial noise, and scores each with [`video_metrics`].
#[allow(clippy::too_many_arguments)]
pub fn coherence_report<F: Real>(
    params: &ModelParams<F>,
    classes: &[usize],
    n_per_class: usize,
    variants: &[Variant],
    schedule: &TimestepSchedule,
    dims: (usize, usize, usize, usize),
    seed: u64,
) -> Result<MetricsReport> {
    if !params.joint_mode {
        return Err(Error::invalid(
            "checkpoint",
            "coherence report needs a joint (videojam) checkpoint",
        ));
    }
    if classes.is_empty() || n_per_class == 0 || variants.is_empty() {
        return Err(Error::invalid("probe", "need classes, samples and variants"));
    }
    for v in variants {
        v.guidance.validate()?;
    }
    let mut samples = Vec::new();
    for v in variants {
        for (ci, &c) in classes.iter().enumerate() {
            for k in 0..n_per_class {
                let s = paired_seed(seed, ci, k, n_per_class);
                let (video, fv) = euler_sample(params, dims, Some(c), &v.guidance, schedule, s)?;
                samples.push(SampleMetrics {
                    variant: v.name.clone(),
                    class_id: c,
                    seed: s,
                    metrics: video_metrics(&video, &fv)?,
                });
            }
        }
    }
    let summaries = variants
        .iter()
        .map(|v| {
            let mine: Vec<&Metrics> = samples
                .iter()
                .filter(|s| s.variant == v.name)
                .map(|s| &s.metrics)
                .collect();
            let n = mine.len() as f64;
            let mean = Metrics {
                flow_consistency: mine.iter().map(|m| m.flow_consistency).sum::<f64>() / n,
                dynamic_degree: mine.iter().map(|m| m.dynamic_degree).sum::<f64>() / n,
                smoothness: mine.iter().map(|m| m.smoothness).sum::<f64>() / n,
            };
            VariantSummary {
                variant: v.clone(),
                n: mine.len(),
                mean,
            }
        })
        .collect();
    Ok(MetricsReport { samples, summaries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowfield::{encode_flow_rgb, pad_flow, DEFAULT_SIGMA};
    use crate::flowmatch::{make_schedule, JointVelocity, ScheduleKind};
    use crate::jamdit::{extend_joint, init_base, ModelConfig};
    use crate::synthdata::{render_texture_pan, Dataset, DatasetConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            embed_dim: 12,
            n_blocks: 1,
            n_heads: 2,
            mlp_ratio: 2.0,
            ..ModelConfig::default()
        }
    }

    fn holdout() -> Vec<Item> {
        let cfg = DatasetConfig {
            n_train: 0,
            n_holdout: 4,
            frames: 4,
            height: 8,
            width: 8,
            size_min: 2,
            size_max: 3,
            max_axis_speed: 1,
        };
        Dataset::generate(&cfg, 3).unwrap().holdout
    }

    fn probe_cfg(identity: bool) -> ShuffleProbeConfig {
        ShuffleProbeConfig {
            samples_per_bucket: 2,
            identity,
            ..ShuffleProbeConfig::default()
        }
    }

    #[test]
    fn identity_permutation_gives_zero_delta() {
        let base = init_base::<f64>(&tiny_model(), 0).unwrap();
        let joint = extend_joint(&base, 1).unwrap();
        for p in [&base, &joint] {
            let c = shuffle_loss_probe(p, &holdout(), &probe_cfg(true)).unwrap();
            assert!(c.delta_loss.iter().all(|&d| d == 0.0), "{:?}", c.delta_loss);
        }
    }

    #[test]
    fn probe_curve_shape_and_determinism() {
        let base = init_base::<f32>(&tiny_model(), 0).unwrap();
        let a = shuffle_loss_probe(&base, &holdout(), &probe_cfg(false)).unwrap();
        let b = shuffle_loss_probe(&base, &holdout(), &probe_cfg(false)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tag, TrainMode::Base);
        assert_eq!(a.centers.len(), 10);
        assert!((a.centers[0] - 0.05).abs() < 1e-12 && (a.centers[9] - 0.95).abs() < 1e-12);
        assert!(a.delta_loss.iter().all(|d| d.is_finite()));
        assert!(a.counts.iter().all(|&c| c == 2));
        let csv = a.to_csv();
        assert!(csv.starts_with("t_bucket,delta_loss\n"));
        assert_eq!(csv.lines().count(), 11);
        assert!(shuffle_loss_probe(&base, &[], &probe_cfg(false)).is_err());
    }

    #[test]
    fn mean_over_weights_counts() {
        let c = ProbeCurve {
            centers: vec![0.25, 0.75],
            delta_loss: vec![1.0, 3.0],
            counts: vec![1, 3],
            tag: TrainMode::Base,
        };
        assert_eq!(c.mean_over(0.0, 1.0), 2.5);
        assert_eq!(c.mean_over(0.0, 0.6), 1.0);
        assert_eq!(c.mean_over(0.6, 1.0), 3.0);
    }

    struct Zero;

    impl VelocityModel for Zero {
        fn predict(&self, x: &Array4<f64>, d: &Array4<f64>, _c: Option<usize>, _t: f64) -> Result<JointVelocity> {
            Ok(JointVelocity {
                x: Array4::zeros(x.dim()),
                d: Array4::zeros(d.dim()),
            })
        }
    }

    #[test]
    fn sdedit_from_one_returns_source() {
        let (video, flow) = render_texture_pan(4, 8, 8, [1, 0], 2).unwrap();
        let fv = flow_video_for(&flow.unpadded(), DEFAULT_SIGMA).unwrap();
        let sched = make_schedule(10, ScheduleKind::Uniform).unwrap();
        let out = sdedit_probe(
            &Zero,
            &video,
            &fv,
            Some(0),
            &[1.0, 0.5, 0.0],
            &GuidanceConfig::default(),
            &sched,
            1,
        )
        .unwrap();
        assert_eq!(out[0].video, video);
        assert_eq!(out[0].flow_video.data, fv.data);
        assert_eq!(out[0].structure_error, 0.0);
        assert_eq!(out[0].structure_similarity, 1.0);
        assert!(out
            .iter()
            .all(|o| o.structure_similarity > 0.0 && o.structure_similarity <= 1.0));
        assert!(sdedit_probe(&Zero, &video, &fv, None, &[1.5], &GuidanceConfig::default(), &sched, 1).is_err());
    }

    #[test]
    fn static_video_has_no_dynamics() {
        let video = Video::new(Array4::from_elem((4, 8, 8, 3), -0.8)).unwrap();
        let fv = FlowVideo {
            data: Array4::from_elem((4, 8, 8, 3), -1.0),
            sigma: DEFAULT_SIGMA,
        };
        let m = video_metrics(&video, &fv).unwrap();
        assert_eq!(m.dynamic_degree, 0.0);
        assert_eq!(m.smoothness, 0.0);
        assert_eq!(m.flow_consistency, 0.0);
    }

    #[test]
    fn rigid_translation_flow_consistency_is_codec_error() {
        let (video, flow) = render_texture_pan(6, 16, 16, [2, -1], 4).unwrap();
        let fv = encode_flow_rgb(&pad_flow(&flow.unpadded()).unwrap(), DEFAULT_SIGMA).unwrap();
        let m = video_metrics(&video, &fv).unwrap();
        assert!(m.flow_consistency < 1e-5, "{}", m.flow_consistency);
        assert!((m.dynamic_degree - 5f64.sqrt()).abs() < 0.5, "{}", m.dynamic_degree);
    }

    #[test]
    fn smoothness_of_linear_ramp_is_zero() {
        let v = Video::new(Array4::from_shape_fn((5, 2, 2, 3), |(t, _, _, _)| {
            -0.5 + 0.2 * t as f64
        }))
        .unwrap();
        assert!(smoothness(&v) < 1e-12);
        let mut z = Array4::zeros((3, 1, 1, 1));
        z[[1, 0, 0, 0]] = 1.0;
        assert_eq!(smoothness(&Video::new(z).unwrap()), 2.0);
    }

    #[test]
    fn coherence_report_pairs_seeds_across_variants() {
        let p = extend_joint(&init_base::<f32>(&tiny_model(), 0).unwrap(), 1).unwrap();
        let sched = make_schedule(3, ScheduleKind::Uniform).unwrap();
        let variants = default_variants();
        let r = coherence_report(&p, &[0, 5], 2, &variants, &sched, (2, 8, 8, 3), 11).unwrap();
        assert_eq!(r.summaries.len(), 4);
        for name in ["inner", "inner_w2_0", "ip2p", "cfg"] {
            let seeds: Vec<u64> = r.samples.iter().filter(|s| s.variant == name).map(|s| s.seed).collect();
            assert_eq!(seeds, vec![11, 12, 13, 14]);
        }
        for s in &r.samples {
            let m = s.metrics;
            assert!(m.flow_consistency >= 0.0 && m.dynamic_degree >= 0.0 && m.smoothness >= 0.0);
        }
        assert_eq!(r.to_csv().lines().count(), 1 + 16);
        assert!(r.to_text().contains("ip2p"));
        let base = init_base::<f32>(&tiny_model(), 0).unwrap();
        assert!(coherence_report(&base, &[0], 1, &variants, &sched, (2, 8, 8, 3), 0).is_err());
    }
}
