//! Flow-matching core: the linear noise-to-data path, its velocity target,
//! the (joint) regression loss, timestep grids and the Euler sampler.

use ndarray::{Array, Array4, ArrayView, Dimension, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowfield::{FlowVideo, DEFAULT_SIGMA};
use crate::guidance::{self, GuidanceConfig, VelocityModel};
use crate::synthdata::Video;

fn same_shape<D: Dimension>(a: &ArrayView<'_, f64, D>, b: &ArrayView<'_, f64, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid("t", format!("{t} outside [0, 1]")));
    }
    Ok(())
}

/// `t * x1 + (1 - t) * x0`.
pub fn interpolate<D: Dimension>(
    x1: ArrayView<'_, f64, D>,
    x0: ArrayView<'_, f64, D>,
    t: f64,
) -> Result<Array<f64, D>> {
    same_shape(&x1, &x0)?;
    check_t(t)?;
    Ok(Zip::from(&x1).and(&x0).map_collect(|&a, &b| t * a + (1.0 - t) * b))
}

/// `x1 - x0`, the constant time derivative of [`interpolate`].
pub fn velocity_target<D: Dimension>(x1: ArrayView<'_, f64, D>, x0: ArrayView<'_, f64, D>) -> Result<Array<f64, D>> {
    same_shape(&x1, &x0)?;
    Ok(&x1 - &x0)
}

/// An appearance/motion pair of video-shaped arrays: a velocity prediction,
/// a velocity target, or a guided combination of branch predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct JointVelocity {
    pub x: Array4<f64>,
    pub d: Array4<f64>,
}

pub type VelocityTarget = JointVelocity;

/// Sampler state: noisy video and noisy flow video at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub x: Array4<f64>,
    pub d: Array4<f64>,
    pub t: f64,
}

impl JointState {
    pub fn new(x: Array4<f64>, d: Array4<f64>, t: f64) -> Result<Self> {
        if x.dim() != d.dim() {
            return Err(Error::shape(format!("x {:?} vs d {:?}", x.dim(), d.dim())));
        }
        check_t(t)?;
        Ok(JointState { x, d, t })
    }
}

fn mse(a: &Array4<f64>, b: &Array4<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let n = a.len().max(1) as f64;
    let s = Zip::from(a).and(b).fold(0.0, |acc, &p, &q| acc + (p - q) * (p - q));
    if !s.is_finite() {
        return Err(Error::NonFinite("loss is not finite".into()));
    }
    Ok(s / n)
}

/// Mean squared error on appearance, plus (when `motion_mask`) the weighted
/// motion term: `(L_x + w L_d) / (1 + w)`.
pub fn fm_loss_weighted(
    pred: &JointVelocity,
    target: &VelocityTarget,
    motion_mask: bool,
    motion_weight: f64,
) -> Result<f64> {
    let lx = mse(&pred.x, &target.x)?;
    let ld = mse(&pred.d, &target.d)?;
    if motion_mask {
        Ok((lx + motion_weight * ld) / (1.0 + motion_weight))
    } else {
        Ok(lx)
    }
}

/// Equal-weight joint loss.
pub fn fm_loss(pred: &JointVelocity, target: &VelocityTarget, motion_mask: bool) -> Result<f64> {
    fm_loss_weighted(pred, target, motion_mask, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Uniform,
    /// `t_k = 1 - (1 - k/N)^2`: dense steps early, sparse near the data.
    Quadratic,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(ScheduleKind::Uniform),
            "quadratic" => Ok(ScheduleKind::Quadratic),
            other => Err(Error::invalid("schedule", format!("unknown kind {other:?}"))),
        }
    }
}

/// Strictly increasing knots from exactly 0 to exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepSchedule {
    pub knots: Vec<f64>,
    pub kind: ScheduleKind,
}

impl TimestepSchedule {
    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }

    /// Index of the step whose interval contains `t_start`: where a
    /// partially-noised generation resumes.
    pub fn first_step_from(&self, t_start: f64) -> usize {
        self.knots[1..]
            .iter()
            .position(|&k| k > t_start + 1e-12)
            .unwrap_or(self.steps())
    }
}

pub const DEFAULT_SAMPLING_STEPS: usize = 20;

pub fn make_schedule(n_steps: usize, kind: ScheduleKind) -> Result<TimestepSchedule> {
    if n_steps < 1 {
        return Err(Error::invalid("steps", "need at least one step"));
    }
    let n = n_steps as f64;
    let mut knots: Vec<f64> = (0..=n_steps)
        .map(|k| {
            let r = k as f64 / n;
            match kind {
                ScheduleKind::Uniform => r,
                ScheduleKind::Quadratic => 1.0 - (1.0 - r) * (1.0 - r),
            }
        })
        .collect();
    knots[0] = 0.0;
    knots[n_steps] = 1.0;
    Ok(TimestepSchedule { knots, kind })
}

/// Standard-normal `(x0, d0)` of the given `(T, H, W, C)` shape; `x0` is
/// drawn before `d0` from one seeded stream.
pub fn draw_noise(dims: (usize, usize, usize, usize), seed: u64) -> (Array4<f64>, Array4<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = Array4::from_shape_simple_fn(dims, || rng.sample(StandardNormal));
    let d0 = Array4::from_shape_simple_fn(dims, || rng.sample(StandardNormal));
    (x0, d0)
}

/// Integrates `state` along `schedule` from step `first_step` to the end,
/// using the guided velocity at every step. Step indices are absolute so the
/// motion gate stays tied to the full generation.
pub fn euler_integrate<M: VelocityModel + ?Sized>(
    model: &M,
    mut state: JointState,
    cond: Option<usize>,
    guidance: &GuidanceConfig,
    schedule: &TimestepSchedule,
    first_step: usize,
) -> Result<JointState> {
    guidance.validate()?;
    let n = schedule.steps();
    for k in first_step..n {
        // A resumed state may sit inside its first interval.
        let t0 = if k == first_step {
            state.t.max(schedule.knots[k])
        } else {
            schedule.knots[k]
        };
        let t1 = schedule.knots[k + 1];
        let (w1, w2) = guidance::gate_motion_guidance(k, n, guidance)?;
        let u = guidance::guided_velocity(model, &state.x, &state.d, cond, t0, guidance.rule, w1, w2)?;
        let dt = t1 - t0;
        Zip::from(&mut state.x).and(&u.x).for_each(|s, &v| *s += dt * v);
        Zip::from(&mut state.d).and(&u.d).for_each(|s, &v| *s += dt * v);
        state.t = t1;
        if state.x.iter().chain(state.d.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampler state diverged at step {k}")));
        }
    }
    Ok(state)
}

/// Generates a `(video, flow video)` pair from pure noise.
pub fn euler_sample<M: VelocityModel + ?Sized>(
    model: &M,
    dims: (usize, usize, usize, usize),
    cond: Option<usize>,
    guidance: &GuidanceConfig,
    schedule: &TimestepSchedule,
    seed: u64,
) -> Result<(Video, FlowVideo)> {
    let (x0, d0) = draw_noise(dims, seed);
    let state = euler_integrate(model, JointState::new(x0, d0, 0.0)?, cond, guidance, schedule, 0)?;
    Ok(finish(state))
}

/// Clamps a finished state into the `[-1, 1]` pixel range.
pub fn finish(state: JointState) -> (Video, FlowVideo) {
    let x = state.x.mapv(|v| v.clamp(-1.0, 1.0));
    let d = state.d.mapv(|v| v.clamp(-1.0, 1.0));
    (
        Video { data: x },
        FlowVideo {
            data: d,
            sigma: DEFAULT_SIGMA,
        },
    )
}
