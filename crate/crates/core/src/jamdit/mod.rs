//! A tiny diffusion transformer over spatiotemporal patch tokens, and its
//! joint appearance-motion extension.
//!
//! Each block runs full self-attention over every video token, then
//! cross-attention to a single condition token (class embedding plus an
//! embedded timestep), then a GELU feed-forward layer, all pre-norm with
//! residual connections. The joint extension widens only the input and
//! output projections: the new input rows start at zero, so an extended model
//! computes exactly what its base model did and ignores the motion input
//! until it is fine-tuned.

mod model;
mod patch;

use ndarray::{s, Array1, Array2, Array4, ArrayD, ArrayView4, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmatch::JointVelocity;
use crate::format::{Container, Tensor};
use crate::guidance::VelocityModel;
use crate::real::Real;

pub use model::{backward, forward_tokens, ForwardCache};
pub use patch::{patchify, unpatchify, PatchSize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch_t: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    /// Real classes; id `n_classes` is reserved for the null condition.
    pub n_classes: usize,
    pub in_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_t: 1,
            patch: 2,
            embed_dim: 64,
            n_blocks: 4,
            n_heads: 4,
            mlp_ratio: 4.0,
            n_classes: crate::synthdata::NUM_CLASSES,
            in_channels: 3,
        }
    }
}

impl ModelConfig {
    pub fn patch_size(&self) -> PatchSize {
        PatchSize {
            temporal: self.patch_t,
            spatial: self.patch,
        }
    }

    /// Elements of one single-signal token, `p_t * p^2 * C_in`.
    pub fn token_dim(&self) -> usize {
        self.patch_size().volume() * self.in_channels
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn null_class(&self) -> usize {
        self.n_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_t == 0 || self.patch == 0 {
            return Err(Error::invalid("model.patch", "patch sizes must be positive"));
        }
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(
                "model.n_heads",
                format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.n_heads),
            ));
        }
        if !self.embed_dim.is_multiple_of(2) {
            return Err(Error::invalid("model.embed_dim", "must be even"));
        }
        if self.n_blocks == 0 {
            return Err(Error::invalid("model.n_blocks", "need at least one block"));
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 || self.hidden_dim() == 0 {
            return Err(Error::invalid("model.mlp_ratio", "must be positive"));
        }
        if self.in_channels == 0 {
            return Err(Error::invalid("model.in_channels", "must be positive"));
        }
        Ok(())
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F> {
    pub ln1_g: Array1<F>,
    pub ln1_b: Array1<F>,
    /// Bias-free: a key bias cannot change the softmax, so it would only
    /// carry a structurally zero gradient.
    pub qkv_w: Array2<F>,
    pub attn_out_w: Array2<F>,
    pub attn_out_b: Array1<F>,
    pub cross_v_w: Array2<F>,
    pub cross_v_b: Array1<F>,
    pub cross_out_w: Array2<F>,
    pub cross_out_b: Array1<F>,
    pub ln2_g: Array1<F>,
    pub ln2_b: Array1<F>,
    pub fc1_w: Array2<F>,
    pub fc1_b: Array1<F>,
    pub fc2_w: Array2<F>,
    pub fc2_b: Array1<F>,
}

macro_rules! named_tensors {
    ($ty:ident { $($field:ident => $name:literal),* $(,)? }) => {
        impl<F: Real> $ty<F> {
            fn fields(&self) -> Vec<(&'static str, ArrayViewD<'_, F>)> {
                vec![$(($name, self.$field.view().into_dyn())),*]
            }

            fn fields_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, F>)> {
                vec![$(($name, self.$field.view_mut().into_dyn())),*]
            }
        }
    };
}

named_tensors!(BlockParams {
    ln1_g => "ln1.g",
    ln1_b => "ln1.b",
    qkv_w => "attn.qkv.w",
    attn_out_w => "attn.out.w",
    attn_out_b => "attn.out.b",
    cross_v_w => "cross.v.w",
    cross_v_b => "cross.v.b",
    cross_out_w => "cross.out.w",
    cross_out_b => "cross.out.b",
    ln2_g => "ln2.g",
    ln2_b => "ln2.b",
    fc1_w => "mlp.fc1.w",
    fc1_b => "mlp.fc1.b",
    fc2_w => "mlp.fc2.w",
    fc2_b => "mlp.fc2.b",
});

/// Embeddings and projections outside the block stack.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<F> {
    pub w_in: Array2<F>,
    pub b_in: Array1<F>,
    pub class_embed: Array2<F>,
    pub time_fc1_w: Array2<F>,
    pub time_fc1_b: Array1<F>,
    pub time_fc2_w: Array2<F>,
    pub time_fc2_b: Array1<F>,
    pub ln_f_g: Array1<F>,
    pub ln_f_b: Array1<F>,
    pub w_out: Array2<F>,
    pub b_out: Array1<F>,
}

named_tensors!(HeadParams {
    w_in => "w_in",
    b_in => "b_in",
    class_embed => "class_embed",
    time_fc1_w => "time.fc1.w",
    time_fc1_b => "time.fc1.b",
    time_fc2_w => "time.fc2.w",
    time_fc2_b => "time.fc2.b",
    ln_f_g => "ln_f.g",
    ln_f_b => "ln_f.b",
    w_out => "w_out",
    b_out => "b_out",
});

/// All trainable weights. `joint_mode` marks the widened projections.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub joint_mode: bool,
    pub head: HeadParams<F>,
    pub blocks: Vec<BlockParams<F>>,
}

/// Model output: appearance velocity, plus motion velocity in joint mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<F> {
    pub u_x: Array4<F>,
    pub u_d: Option<Array4<F>>,
}

fn xavier<F: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| F::of(rng.random_range(-bound..bound)))
}

impl<F: Real> ModelParams<F> {
    /// Zero tensors with the shapes `config` and `joint_mode` imply.
    pub fn zeros(config: &ModelConfig, joint_mode: bool) -> Self {
        let c = config.embed_dim;
        let hd = config.hidden_dim();
        let width = config.token_dim() * if joint_mode { 2 } else { 1 };
        let z1 = |n| Array1::zeros(n);
        let z2 = |r, k| Array2::zeros((r, k));
        let head = HeadParams {
            w_in: z2(width, c),
            b_in: z1(c),
            class_embed: z2(config.n_classes + 1, c),
            time_fc1_w: z2(c, c),
            time_fc1_b: z1(c),
            time_fc2_w: z2(c, c),
            time_fc2_b: z1(c),
            ln_f_g: z1(c),
            ln_f_b: z1(c),
            w_out: z2(c, width),
            b_out: z1(width),
        };
        let blocks = (0..config.n_blocks)
            .map(|_| BlockParams {
                ln1_g: z1(c),
                ln1_b: z1(c),
                qkv_w: z2(c, 3 * c),
                attn_out_w: z2(c, c),
                attn_out_b: z1(c),
                cross_v_w: z2(c, c),
                cross_v_b: z1(c),
                cross_out_w: z2(c, c),
                cross_out_b: z1(c),
                ln2_g: z1(c),
                ln2_b: z1(c),
                fc1_w: z2(c, hd),
                fc1_b: z1(hd),
                fc2_w: z2(hd, c),
                fc2_b: z1(c),
            })
            .collect();
        ModelParams {
            config: config.clone(),
            joint_mode,
            head,
            blocks,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config, self.joint_mode)
    }

    /// Every tensor with its stable checkpoint name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out: Vec<(String, ArrayViewD<'_, F>)> = Vec::new();
        let head = self.head.fields();
        let (front, back) = head.split_at(7);
        out.extend(front.iter().map(|(n, a)| (n.to_string(), a.clone())));
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.fields().into_iter().map(|(n, a)| (format!("block{i}.{n}"), a)));
        }
        out.extend(back.iter().map(|(n, a)| (n.to_string(), a.clone())));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut head = self.head.fields_mut();
        let back = head.split_off(7);
        let mut out: Vec<(String, ArrayViewMutD<'_, F>)> = head.into_iter().map(|(n, a)| (n.to_string(), a)).collect();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.fields_mut().into_iter().map(|(n, a)| (format!("block{i}.{n}"), a)));
        }
        out.extend(back.into_iter().map(|(n, a)| (n.to_string(), a)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }

    /// Converts every tensor to another precision.
    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let mut out = ModelParams::<G>::zeros(&self.config, self.joint_mode);
        for ((_, mut dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            dst.zip_mut_with(&src, |d, &s| *d = G::of(s.f64()));
        }
        out
    }

    /// Flattens into a checkpoint container; the trailer records the config
    /// and mode so shapes can be rebuilt on load.
    pub fn to_container(&self) -> Container {
        let entries = self
            .tensors()
            .into_iter()
            .map(|(n, a)| (n, Tensor::from_real(a)))
            .collect();
        let trailer = serde_json::json!({
            "config": self.config,
            "joint_mode": self.joint_mode,
        });
        Container { entries, trailer }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(c.trailer["config"].clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        config.validate()?;
        let joint_mode = c.trailer["joint_mode"]
            .as_bool()
            .ok_or_else(|| Error::Format("checkpoint trailer lacks joint_mode".into()))?;
        let mut params = Self::zeros(&config, joint_mode);
        let expected = params.tensors().len();
        if c.entries.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model needs {expected}",
                c.entries.len()
            )));
        }
        for (name, mut dst) in params.tensors_mut() {
            let src = c
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if src.shape() != dst.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            let src: ArrayD<F> = src.to_real();
            dst.assign(&src);
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("checkpoint holds non-finite weights".into()));
        }
        Ok(params)
    }
}

/// Deterministic base-model initialization: Xavier-uniform linear layers,
/// `N(0, 0.02)` class embeddings, unit norms and zero biases.
pub fn init_base<F: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::<F>::zeros(config, false);
    let c = config.embed_dim;
    let hd = config.hidden_dim();
    let td = config.token_dim();
    let embed = Normal::new(0.0, 0.02).unwrap();
    p.head.w_in = xavier(&mut rng, td, c);
    p.head.class_embed = Array2::from_shape_fn((config.n_classes + 1, c), |_| F::of(embed.sample(&mut rng)));
    p.head.time_fc1_w = xavier(&mut rng, c, c);
    p.head.time_fc2_w = xavier(&mut rng, c, c);
    for b in &mut p.blocks {
        b.ln1_g.fill(F::one());
        b.ln2_g.fill(F::one());
        b.qkv_w = xavier(&mut rng, c, 3 * c);
        b.attn_out_w = xavier(&mut rng, c, c);
        b.cross_v_w = xavier(&mut rng, c, c);
        b.cross_out_w = xavier(&mut rng, c, c);
        b.fc1_w = xavier(&mut rng, c, hd);
        b.fc2_w = xavier(&mut rng, hd, c);
    }
    p.head.ln_f_g.fill(F::one());
    p.head.w_out = output_init(&mut rng, c, td);
    Ok(p)
}

/// Output-layer scheme, shared by the base model and the motion columns added
/// by [`extend_joint`].
fn output_init<F: Real, R: Rng>(rng: &mut R, embed_dim: usize, token_dim: usize) -> Array2<F> {
    xavier(rng, embed_dim, token_dim)
}

/// Widens a base model to take `[x_t, d_t]` and predict `[u_x, u_d]`.
///
/// `W_in` gains `token_dim` all-zero rows below the video rows; `W_out` gains
/// `token_dim` freshly initialized columns after the video columns. Every
/// other weight is copied unchanged.
pub fn extend_joint<F: Real>(base: &ModelParams<F>, seed: u64) -> Result<ModelParams<F>> {
    if base.joint_mode {
        return Err(Error::invalid("params", "model is already joint"));
    }
    let td = base.config.token_dim();
    let c = base.config.embed_dim;
    let mut out = base.clone();
    out.joint_mode = true;
    let mut w_in = Array2::zeros((2 * td, c));
    w_in.slice_mut(s![..td, ..]).assign(&base.head.w_in);
    out.head.w_in = w_in;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w_out = Array2::zeros((c, 2 * td));
    w_out.slice_mut(s![.., ..td]).assign(&base.head.w_out);
    w_out
        .slice_mut(s![.., td..])
        .assign(&output_init::<F, _>(&mut rng, c, td));
    out.head.w_out = w_out;
    let mut b_out = Array1::zeros(2 * td);
    b_out.slice_mut(s![..td]).assign(&base.head.b_out);
    out.head.b_out = b_out;
    Ok(out)
}

fn check_condition(config: &ModelConfig, y: Option<usize>) -> Result<usize> {
    match y {
        None => Ok(config.null_class()),
        Some(id) if id < config.n_classes => Ok(id),
        Some(id) => Err(Error::invalid(
            "class_id",
            format!("{id} unknown (model has {} classes)", config.n_classes),
        )),
    }
}

fn check_time<F: Real>(t: F) -> Result<()> {
    if !(t >= F::zero() && t <= F::one()) {
        return Err(Error::invalid("t", format!("{t} outside [0, 1]")));
    }
    Ok(())
}

fn check_input<F: Real>(config: &ModelConfig, x: &ArrayView4<'_, F>) -> Result<()> {
    let (t, h, w, c) = x.dim();
    if c != config.in_channels {
        return Err(Error::shape(format!(
            "input has {c} channels, model expects {}",
            config.in_channels
        )));
    }
    config.patch_size().check(t, h, w)
}

/// Base prediction `u = M(x_t W_in, y, t) W_out`. `y = None` is the null condition.
pub fn forward_base<F: Real>(
    params: &ModelParams<F>,
    x_t: ArrayView4<'_, F>,
    y: Option<usize>,
    t: F,
) -> Result<Prediction<F>> {
    if params.joint_mode {
        return Err(Error::invalid("params", "forward_base needs a base (non-joint) model"));
    }
    check_input(&params.config, &x_t)?;
    check_time(t)?;
    let cls = check_condition(&params.config, y)?;
    let patch = params.config.patch_size();
    let tokens = patchify(x_t, patch)?;
    let (out, _) = forward_tokens(
        params,
        tokens,
        cls,
        t,
        patch.grid(x_t.dim().0, x_t.dim().1, x_t.dim().2),
    );
    let u_x = unpatchify(out.view(), patch, x_t.dim())?;
    Ok(Prediction { u_x, u_d: None })
}

/// Joint prediction from the channel concatenation `[x_t, d_t]`; the first
/// `token_dim` output channels are appearance, the rest motion. Pass an
/// all-zero `d_t` for the null motion condition.
pub fn forward_joint<F: Real>(
    params: &ModelParams<F>,
    x_t: ArrayView4<'_, F>,
    d_t: ArrayView4<'_, F>,
    y: Option<usize>,
    t: F,
) -> Result<Prediction<F>> {
    if !params.joint_mode {
        return Err(Error::invalid("params", "forward_joint needs an extended model"));
    }
    check_input(&params.config, &x_t)?;
    if x_t.dim() != d_t.dim() {
        return Err(Error::shape(format!("x_t {:?} vs d_t {:?}", x_t.dim(), d_t.dim())));
    }
    check_time(t)?;
    let cls = check_condition(&params.config, y)?;
    let patch = params.config.patch_size();
    let tokens = joint_tokens(x_t, d_t, patch)?;
    let (t_dim, h, w, _) = x_t.dim();
    let (out, _) = forward_tokens(params, tokens, cls, t, patch.grid(t_dim, h, w));
    let (u_x, u_d) = split_joint(out.view(), &params.config, x_t.dim())?;
    Ok(Prediction { u_x, u_d: Some(u_d) })
}

/// Per-patch channel concatenation `[x | d]` of two arrays' tokens.
pub fn joint_tokens<F: Real>(x: ArrayView4<'_, F>, d: ArrayView4<'_, F>, patch: PatchSize) -> Result<Array2<F>> {
    let tx = patchify(x, patch)?;
    let td = patchify(d, patch)?;
    ndarray::concatenate(Axis(1), &[tx.view(), td.view()]).map_err(|e| Error::shape(e.to_string()))
}

/// Splits joint output tokens into appearance and motion arrays.
pub fn split_joint<F: Real>(
    out: ndarray::ArrayView2<'_, F>,
    config: &ModelConfig,
    dims: (usize, usize, usize, usize),
) -> Result<(Array4<F>, Array4<F>)> {
    let td = config.token_dim();
    let patch = config.patch_size();
    let u_x = unpatchify(out.slice(s![.., ..td]), patch, dims)?;
    let u_d = unpatchify(out.slice(s![.., td..]), patch, dims)?;
    Ok((u_x, u_d))
}

/// Sampling adapter. Base models ignore `d` and predict zero motion velocity.
impl<F: Real> VelocityModel for ModelParams<F> {
    fn predict(&self, x: &Array4<f64>, d: &Array4<f64>, cond: Option<usize>, t: f64) -> Result<JointVelocity> {
        let xf = x.mapv(F::of);
        let back = |a: Array4<F>| a.mapv(|v| v.f64());
        if self.joint_mode {
            let p = forward_joint(self, xf.view(), d.mapv(F::of).view(), cond, F::of(t))?;
            let u_d = p
                .u_d
                .ok_or_else(|| Error::shape("joint model returned no motion".to_string()))?;
            Ok(JointVelocity {
                x: back(p.u_x),
                d: back(u_d),
            })
        } else {
            let p = forward_base(self, xf.view(), cond, F::of(t))?;
            Ok(JointVelocity {
                x: back(p.u_x),
                d: Array4::zeros(d.dim()),
            })
        }
    }
}
